"""End-to-end training, indexing and search on top of the individual modules."""

import hashlib
import io
import json
import logging
import math
import os
import struct
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .attributes import AttributeModel, fit_attribute_model
from .errors import FormatError, MissingData
from .evaluation import evaluate_line_spotting, evaluate_word_spotting
from .features import (DEFAULT_SCALES, OrientationField,
                       ReducedDescriptorGrid, VisualVocabulary, block_fisher_vectors,
                       dense_descriptors, fisher_vector, fisher_vector_reduced, fit_vocabulary)
from .integral import build_integral, build_page_map
from .layout import (DEFAULT_GAP_FACTORS, assemble_index, binarize, propose_regions,
                     region_embeddings)
from .retrieval import plan_query, rerank, sliding_window_scan
from .text_embedding import PHOB, PHOC, EmbeddingConfig, corpus_config, phob_encode, phoc_encode

log = logging.getLogger(__name__)

BUNDLE_MAGIC = b"SPOT1"
BUNDLE_VERSION = 1

# left/right edge shifts (in blocks) used to augment training windows
WINDOW_JITTER = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1), (-1, 1), (1, -1))


@dataclass
class TrainParams:
    block: int = 8
    step: int = 4
    word_step: int = 2
    scales: tuple = DEFAULT_SCALES
    contrast: float = 0.01
    sigma: float = 1.0
    d_red: int = 62
    k: int = 16
    phoc_dims: int = 128
    phob_dims: int = 96
    svm_reg: float = 1e-4
    svm_epochs: int = 20
    cca_reg: float = 1e-3
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["scales"] = tuple(d["scales"])
        return cls(**d)


@dataclass
class Bundle:
    cfg: EmbeddingConfig
    params: TrainParams
    vocab_plain: VisualVocabulary
    vocab_enriched: VisualVocabulary
    phoc_block: AttributeModel      # integral-image path (block-mean Fisher vectors)
    phoc_word: AttributeModel       # re-ranking path (enriched Fisher vectors)
    phob: AttributeModel            # region indexing
    stats: dict = field(default_factory=dict)


# -- bundle persistence ------------------------------------------------------

def _vocab_arrays(prefix, v):
    return {f"{prefix}.pca_mean": v.pca_mean, f"{prefix}.pca_components": v.pca_components,
            f"{prefix}.weights": v.weights, f"{prefix}.means": v.means,
            f"{prefix}.variances": v.variances}


def _model_arrays(prefix, m):
    return {f"{prefix}.W": m.W, f"{prefix}.U_img": m.U_img, f"{prefix}.U_txt": m.U_txt,
            f"{prefix}.img_mean": m.img_mean, f"{prefix}.txt_mean": m.txt_mean,
            f"{prefix}.correlations": m.correlations}


def bundle_bytes(bundle):
    arrays = {}
    arrays.update(_vocab_arrays("vocab_plain", bundle.vocab_plain))
    arrays.update(_vocab_arrays("vocab_enriched", bundle.vocab_enriched))
    for name in ("phoc_block", "phoc_word", "phob"):
        arrays.update(_model_arrays(name, getattr(bundle, name)))
    table = [[name, list(np.shape(arrays[name]))] for name in sorted(arrays)]
    meta = {
        "config": bundle.cfg.to_dict(),
        "params": bundle.params.to_dict(),
        "stats": bundle.stats,
        "phoc_dim": bundle.cfg.phoc_dim,
        "phob_dim": bundle.cfg.phob_dim,
        "vocab": {"plain_converged": bundle.vocab_plain.converged,
                  "enriched_converged": bundle.vocab_enriched.converged},
        "models": {name: {"kind": getattr(bundle, name).kind,
                          "degenerate": [int(i) for i in getattr(bundle, name).degenerate]}
                   for name in ("phoc_block", "phoc_word", "phob")},
        "arrays": table,
    }
    raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(BUNDLE_MAGIC)
    buf.write(struct.pack("<II", BUNDLE_VERSION, len(raw)))
    buf.write(raw)
    for name, _ in table:
        buf.write(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes())
    return buf.getvalue()


def save_bundle(path, bundle):
    data = bundle_bytes(bundle)
    _atomic_write(path, data)
    return hashlib.sha256(data).hexdigest()


def load_bundle(path):
    """Returns ``(bundle, sha256 hex digest of the file)``."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:5] != BUNDLE_MAGIC:
        raise FormatError(f"{path}: not a model bundle")
    version, n = struct.unpack("<II", data[5:13])
    if version != BUNDLE_VERSION:
        raise FormatError(f"{path}: unsupported bundle version {version}")
    meta = json.loads(data[13:13 + n].decode("utf-8"))
    arrays, off = {}, 13 + n
    for name, shape in meta["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off) \
            .astype(np.float64).reshape(shape)
        off += 4 * count

    def vocab(prefix, enriched):
        return VisualVocabulary(*(arrays[f"{prefix}.{k}"] for k in
                                  ("pca_mean", "pca_components", "weights", "means", "variances")),
                                enriched=enriched, converged=meta["vocab"][f"{prefix[6:]}_converged"])

    def model(prefix):
        info = meta["models"][prefix]
        return AttributeModel(arrays[f"{prefix}.W"], arrays[f"{prefix}.U_img"],
                              arrays[f"{prefix}.U_txt"], arrays[f"{prefix}.img_mean"],
                              arrays[f"{prefix}.txt_mean"], info["kind"],
                              arrays[f"{prefix}.correlations"], info["degenerate"])

    bundle = Bundle(EmbeddingConfig.from_dict(meta["config"]), TrainParams.from_dict(meta["params"]),
                    vocab("vocab_plain", False), vocab("vocab_enriched", True),
                    model("phoc_block"), model("phoc_word"), model("phob"), meta["stats"])
    return bundle, hashlib.sha256(data).hexdigest()


def _atomic_write(path, data):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


# -- training ----------------------------------------------------------------

def block_box(box, block, shape):
    """Block-unit box covering the px ``box``, clipped to a (rows, cols) grid."""
    rows, cols = shape
    x, y, w, h = box
    bx0, by0 = x // block, y // block
    bx1 = min(cols, -(-(x + w) // block))
    by1 = min(rows, -(-(y + h) // block))
    return (bx0, by0, bx1 - bx0, by1 - by0)


def jittered_windows(box, block, shape):
    bx, by, bw, bh = block_box(box, block, shape)
    out = []
    for dl, dr in WINDOW_JITTER:
        x0, x1 = max(0, bx + dl), min(shape[1], bx + bw + dr)
        if x1 - x0 >= 1 and (x0, x1) not in [(o[0], o[0] + o[2]) for o in out]:
            out.append((x0, by, x1 - x0, bh))
    return out


def _px(wbox, block, page_w, page_h):
    bx, by, bw, bh = wbox
    x0, y0 = bx * block, by * block
    return (x0, y0, min(bw * block, page_w - x0), min(bh * block, page_h - y0))


def _grid_lookup(grid):
    pos = np.full(grid.shape[0] * grid.shape[1], -1, dtype=np.int64)
    pos[grid.index] = np.arange(len(grid.index))
    return pos.reshape(grid.shape)


def block_mean_feature(grid, pos, wbox):
    bx, by, bw, bh = wbox
    ids = pos[by:by + bh, bx:bx + bw].ravel()
    ids = ids[ids >= 0]
    if not len(ids):
        return None
    return grid.values[ids].mean(0)


def covered_text(page_truth, box):
    """Transcriptions of the words centred inside ``box``, left to right, concatenated.

    Regions never span lines, so horizontal order is reading order.
    """
    x, y, w, h = box
    inside = []
    for (bx, by, bw, bh), text in page_truth.words:
        if x <= bx + bw / 2 < x + w and y <= by + bh / 2 < y + h:
            inside.append((bx, by, text))
    return "".join(t for _, _, t in sorted(inside))


def word_samples(truth, pages):
    out = []
    for pid in sorted(truth):
        if pid not in pages:
            continue
        for box, text in truth[pid].words:
            out.append((pid, tuple(box), text))
    return out


def train(pages, truth, params=TrainParams(), cfg=None):
    """Fit vocabularies and the three attribute models from annotated pages."""
    samples = word_samples(truth, pages)
    if not samples:
        raise MissingData("no annotated words on the given pages")
    cfg = cfg or corpus_config([t for _, _, t in samples])
    for _, _, t in samples:
        phoc_encode(t, cfg)
    page_ids = sorted({p for p, _, _ in samples})
    p = params
    t0 = time.perf_counter()

    fields, page_desc = {}, {}
    for pid in page_ids:
        fields[pid] = OrientationField(pages[pid], p.sigma)
        page_desc[pid] = dense_descriptors(fields[pid], p.step, p.scales,
                                           contrast=p.contrast, drop_flat=True)
    vocab_plain = fit_vocabulary([page_desc[pid] for pid in page_ids], p.d_red, p.k, p.seed)

    # block-mean features (integral path), plain word boxes (PHOB), enriched crops (re-ranking)
    block_x, block_y = [], []
    phob_x, phob_y = [], []
    crops, vocab_sample, vocab_regions = [], [], []
    for pid in page_ids:
        H, W = fields[pid].shape
        grid = block_fisher_vectors(fields[pid], vocab_plain, p.block, p.step, p.scales,
                                    p.contrast, desc=page_desc[pid])
        pos = _grid_lookup(grid)
        for spid, box, text in samples:
            if spid != pid:
                continue
            phoc = phoc_encode(text, cfg).bits
            phob = phob_encode(text, cfg).bits
            windows = jittered_windows(box, p.block, grid.shape)
            for wbox in windows:
                feat = block_mean_feature(grid, pos, wbox)
                if feat is not None:
                    block_x.append(feat)
                    block_y.append(phoc)
            boxes = [_px(w, p.block, W, H) for w in windows]
            crops.append((pid, boxes, phoc))
            vocab_sample.append(page_desc[pid].in_box(boxes[0]))
            vocab_regions.append(boxes[0])
            for dx0, dx1 in ((0, 0), (-4, 0), (4, 0), (0, -4), (0, 4)):
                x, y, w, h = box
                jb = (max(0, x + dx0), y, max(1, w - dx0 + dx1), h)
                fv = fisher_vector(page_desc[pid].in_box(jb), vocab_plain)
                if not fv.empty:
                    phob_x.append(fv.values)
                    phob_y.append(phob)
        # proposed regions teach the index model what multi-word and partial boxes look like
        for r in propose_regions(binarize(pages[pid]), page_id=pid):
            text = covered_text(truth[pid], r.box)
            if not text:
                continue
            fv = fisher_vector(page_desc[pid].in_box(r.box), vocab_plain)
            if not fv.empty:
                phob_x.append(fv.values)
                phob_y.append(phob_encode(text, cfg).bits)
    log.info("features: %d block windows, %d words, %.1fs",
             len(block_x), len(crops), time.perf_counter() - t0)

    vocab_enriched = fit_vocabulary(vocab_sample, p.d_red, p.k, p.seed, enrich=True,
                                    regions=vocab_regions,
                                    pca=(vocab_plain.pca_mean, vocab_plain.pca_components))
    word_x, word_labels = [], []
    for pid in page_ids:
        grid = ReducedDescriptorGrid(fields[pid], vocab_enriched, p.word_step, p.scales,
                                     p.contrast)
        for cpid, boxes, phoc in crops:
            if cpid != pid:
                continue
            for b in boxes:
                z, xy = grid.window(b)
                if len(z):
                    word_x.append(fisher_vector_reduced(z, xy, vocab_enriched, b).values)
                    word_labels.append(phoc)
    word_x = np.array(word_x)
    log.info("enriched features: %d crops, %.1fs", len(word_x), time.perf_counter() - t0)

    common = dict(svm_reg=p.svm_reg, cca_reg=p.cca_reg, epochs=p.svm_epochs, seed=p.seed)
    phoc_block = fit_attribute_model(np.array(block_x), np.array(block_y), PHOC,
                                     p.phoc_dims, **common)
    phoc_word = fit_attribute_model(word_x, np.array(word_labels), PHOC, p.phoc_dims, **common)
    phob = fit_attribute_model(np.array(phob_x), np.array(phob_y), PHOB, p.phob_dims, **common)
    log.info("training done in %.1fs", time.perf_counter() - t0)

    widths = {}
    for _, box, text in samples:
        widths.setdefault(text, []).append(box[2])
    stats = {
        "word_widths": {t: float(np.mean(v)) for t, v in sorted(widths.items())},
        "char_width": float(sum(b[2] for _, b, _ in samples) / sum(len(t) for _, _, t in samples)),
        "n_train_words": len(samples),
    }
    return Bundle(cfg, params, vocab_plain, vocab_enriched, phoc_block, phoc_word, phob, stats)


# -- indexing ----------------------------------------------------------------

@dataclass
class IndexedCorpus:
    index: object
    maps: dict                  # page id -> PageAttributeMap
    skipped: dict = field(default_factory=dict)


def index_pages(bundle, pages, bundle_hash="", gap_factors=DEFAULT_GAP_FACTORS):
    """Propose and embed regions, build the bigram index and the per-page attribute maps."""
    p = bundle.params
    maps, kept_all, emb_all, page_table, skipped = {}, [], [], [], {}
    next_id = 0
    for pid in sorted(pages):
        img = pages[pid]
        try:
            fld = OrientationField(img, p.sigma)
            desc = dense_descriptors(fld, p.step, p.scales, contrast=p.contrast, drop_flat=True)
            grid = block_fisher_vectors(fld, bundle.vocab_plain, p.block, p.step, p.scales,
                                        p.contrast, desc=desc)
            amap = build_page_map(None, bundle.vocab_plain, bundle.phoc_block, p.block,
                                  page_id=pid, grid=grid)
            regions = propose_regions(binarize(img), gap_factors=gap_factors, page_id=pid,
                                      first_id=next_id)
            kept, emb = region_embeddings(regions, {pid: desc}, bundle.vocab_plain, bundle.phob)
        except Exception as e:  # noqa: BLE001 - a bad page must not sink the whole index
            log.warning("page %s skipped: %s", pid, e)
            skipped[pid] = str(e)
            continue
        next_id += len(regions)
        maps[pid] = amap
        kept_all += kept
        emb_all.append(emb)
        h, w = np.shape(img)
        page_table.append((pid, int(w), int(h)))
    emb = np.vstack(emb_all) if emb_all else np.zeros((0, bundle.phob.dims))
    index = assemble_index(kept_all, emb, bundle.phob, bundle.cfg, page_table, bundle_hash)
    return IndexedCorpus(index, maps, skipped)


# -- search ------------------------------------------------------------------

class Searcher:
    """Runs queries against an index and its page maps.

    ``pages`` (rasters) are only needed for re-ranking; their orientation
    fields are built lazily and kept.
    """

    max_cached_pages = 16

    def __init__(self, bundle, index, maps, pages=None):
        self.bundle = bundle
        self.index = index
        self.integrals = {pid: build_integral(m) for pid, m in maps.items()}
        self.page_sizes = {pid: (w, h) for pid, w, h in index.pages}
        self.pages = pages or {}
        self._grids = OrderedDict()

    def _grid(self, pid):
        """Fine-step descriptor grid of a page, built on first use and kept (LRU)."""
        if pid in self._grids:
            self._grids.move_to_end(pid)
            return self._grids[pid]
        if pid not in self.pages:
            raise MissingData(f"page raster {pid} needed for re-ranking")
        p = self.bundle.params
        grid = ReducedDescriptorGrid(OrientationField(self.pages[pid], p.sigma),
                                     self.bundle.vocab_enriched, p.word_step, p.scales, p.contrast)
        self._grids[pid] = grid
        while len(self._grids) > self.max_cached_pages:
            self._grids.popitem(last=False)
        return grid

    def query(self, text, n=30, top_percent=0, factors=(0.8, 1.0, 1.2), nms_thresh=0.5):
        """Returns ``(initial, reranked or None, stage timings, plan)``."""
        b, p = self.bundle, self.bundle.params
        timings = {}
        t = time.perf_counter()
        plan = plan_query(text, self.index, b.stats, n, b.cfg)
        timings["plan"] = time.perf_counter() - t
        t = time.perf_counter()
        initial = sliding_window_scan(plan, self.integrals, self.page_sizes, b.phoc_block, b.cfg,
                                      p.block, factors, nms_thresh)
        timings["scan"] = time.perf_counter() - t
        reranked = None
        if top_percent and top_percent > 0:
            t = time.perf_counter()
            n_head = math.ceil(top_percent / 100.0 * len(initial.hits) - 1e-9)
            needed = sorted({h.page_id for h in initial.hits[:n_head]})
            grids = {pid: self._grid(pid) for pid in needed}
            reranked = rerank(initial, grids, b.vocab_enriched, b.phoc_word, plan.query, b.cfg,
                              top_percent)
            timings["rerank"] = time.perf_counter() - t
        return initial, reranked, timings, plan


def evaluate(searcher, truth, n=30, top_percent=0, line_mode=False):
    """Run every unique transcription in ``truth`` as a query and score the results."""
    queries = sorted({t for pid in truth for _, t in truth[pid].words if len(t) >= 2})
    initial, reranked, times, failed = {}, {}, [], {}
    for q in queries:
        try:
            ini, rr, tm, _ = searcher.query(q, n, top_percent)
        except Exception as e:  # noqa: BLE001 - a failed query scores zero, reported
            failed[q] = str(e)
            ini, rr, tm = None, None, {}
        initial[q] = ini.hits if ini else []
        if top_percent:
            reranked[q] = rr.hits if rr else []
        times.append(tm)

    def score(res):
        if line_mode:
            return evaluate_line_spotting(
                {q: [(h.page_id, h.box, h.score) for h in hits] for q, hits in res.items()}, truth)
        return evaluate_word_spotting(
            {q: [(h.page_id, h.box) for h in hits] for q, hits in res.items()}, truth)

    out = {"initial": score(initial), "timings": times, "failed": failed, "queries": queries}
    if top_percent:
        out["reranked"] = score(reranked)
    return out
