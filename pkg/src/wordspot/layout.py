"""Candidate regions from connected components and the per-bigram inverted index."""

import io
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .attributes import embed_image, embed_text
from .errors import FormatError, UnknownBigram
from .features import fisher_vector
from .text_embedding import bigram_embedding

log = logging.getLogger(__name__)

DEFAULT_GAP_FACTORS = (0.5, 1.0, 1.5)


@dataclass(frozen=True)
class Region:
    id: int
    page_id: str
    box: tuple          # (x, y, w, h) px
    min_box: tuple      # 90%-density box, inside ``box``
    tag: float          # gap threshold (px) that produced the region


def binarize(page):
    """Foreground where intensity is below 75% of the page mean."""
    img = np.asarray(page, dtype=np.float64)
    return img < 0.75 * img.mean()


def minimal_box(mask, density=0.9):
    """Greedy sub-box of a component mask that keeps more than ``density`` of its pixels.

    Repeatedly drops the border row or column holding the fewest foreground
    pixels (ties: left, right, top, bottom) while the remainder stays above
    the target. Returns (x, y, w, h) relative to the mask.
    """
    total = int(mask.sum())
    r0, r1, c0, c1 = 0, mask.shape[0], 0, mask.shape[1]
    kept = total
    while True:
        cands = []
        if c1 - c0 > 1:
            cands.append((int(mask[r0:r1, c0].sum()), 0))
            cands.append((int(mask[r0:r1, c1 - 1].sum()), 1))
        if r1 - r0 > 1:
            cands.append((int(mask[r0, c0:c1].sum()), 2))
            cands.append((int(mask[r1 - 1, c0:c1].sum()), 3))
        if not cands:
            break
        loss, edge = min(cands)
        if kept - loss <= density * total:
            break
        kept -= loss
        if edge == 0:
            c0 += 1
        elif edge == 1:
            c1 -= 1
        elif edge == 2:
            r0 += 1
        else:
            r1 -= 1
    return (c0, r0, c1 - c0, r1 - r0)


def _union_boxes(boxes):
    b = np.asarray(boxes)
    x0, y0 = b[:, 0].min(), b[:, 1].min()
    x1, y1 = (b[:, 0] + b[:, 2]).max(), (b[:, 1] + b[:, 3]).max()
    return (int(x0), int(y0), int(x1 - x0), int(y1 - y0))


def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def _merge_pairs(n, pairs):
    parent = list(range(n))
    for a, b in pairs:
        ra, rb = _find(parent, a), _find(parent, b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups = {}
    for i in range(n):
        groups.setdefault(_find(parent, i), []).append(i)
    return [groups[k] for k in sorted(groups)]


def components(binary):
    """8-connected components as (full boxes, minimal boxes), raster order."""
    labels, n = ndimage.label(binary, structure=np.ones((3, 3), dtype=int))
    full, mini = [], []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        mask = labels[sl] == lab
        y, x = sl[0].start, sl[1].start
        full.append((x, y, sl[1].stop - x, sl[0].stop - y))
        mx, my, mw, mh = minimal_box(mask)
        mini.append((x + mx, y + my, mw, mh))
    return full, mini


def _overlap_pairs(boxes):
    b = np.asarray(boxes, dtype=np.int64)
    x0, y0, x1, y1 = b[:, 0], b[:, 1], b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    hit = ((x0[:, None] < x1[None]) & (x0[None] < x1[:, None])
           & (y0[:, None] < y1[None]) & (y0[None] < y1[:, None]))
    i, j = np.nonzero(np.triu(hit, 1))
    return list(zip(i.tolist(), j.tolist()))


def _close_pairs(boxes, gap, min_vertical=0.3):
    b = np.asarray(boxes, dtype=np.int64)
    x0, y0, x1, y1 = b[:, 0], b[:, 1], b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    hgap = np.maximum(x0[:, None], x0[None]) - np.minimum(x1[:, None], x1[None])
    vover = np.minimum(y1[:, None], y1[None]) - np.maximum(y0[:, None], y0[None])
    shorter = np.minimum(b[:, 3][:, None], b[:, 3][None])
    close = (hgap < gap) & (vover >= min_vertical * shorter)
    i, j = np.nonzero(np.triu(close, 1))
    return list(zip(i.tolist(), j.tolist()))


def propose_regions(binary, gap_thresholds=None, gap_factors=DEFAULT_GAP_FACTORS,
                    page_id="", first_id=0):
    """Word-like regions from merged connected components.

    Components whose minimal boxes overlap are merged first; then, for each
    gap threshold (px; default ``gap_factors`` times the median component
    height), horizontally close components on the same line are merged.
    The union of all threshold levels is returned without duplicate boxes.
    """
    full, mini = components(binary)
    if not full:
        return []
    groups = _merge_pairs(len(full), _overlap_pairs(mini))
    units_full = [_union_boxes([full[i] for i in g]) for g in groups]
    units_min = [_union_boxes([mini[i] for i in g]) for g in groups]
    if gap_thresholds is None:
        xh = float(np.median([b[3] for b in full]))
        gap_thresholds = [f * xh for f in gap_factors]
    regions, seen = [], set()
    for t in sorted(gap_thresholds):
        for g in _merge_pairs(len(units_full), _close_pairs(units_min, t)):
            box = _union_boxes([units_full[i] for i in g])
            if box in seen:
                continue
            seen.add(box)
            mbox = _union_boxes([units_min[i] for i in g])
            regions.append(Region(first_id + len(regions), page_id, box, mbox, float(t)))
    return regions


@dataclass
class BigramInvertedIndex:
    bigrams: list
    postings: dict          # bigram -> (region ids int array, scores float32 array)
    regions: dict           # id -> Region
    pages: list             # [(page id, width, height)]
    bundle_hash: str = ""

    def page_size(self, page_id):
        for pid, w, h in self.pages:
            if pid == page_id:
                return w, h
        raise KeyError(page_id)


def region_embeddings(regions, page_descs, vocab, model):
    """PHOB-space vectors for regions; regions that fail are dropped with a warning."""
    out, kept = [], []
    for r in regions:
        try:
            fv = fisher_vector(page_descs[r.page_id].in_box(r.box), vocab)
            out.append(embed_image(fv, model))
            kept.append(r)
        except Exception as e:  # noqa: BLE001 - per-region isolation
            log.warning("region %d on %s skipped: %s", r.id, r.page_id, e)
    return kept, np.array(out).reshape(len(kept), model.dims)


def rank_postings(region_ids, sims):
    """Sort one bigram's regions by (score desc, id asc) on float32 scores."""
    scores = np.asarray(sims, dtype=np.float32)
    ids = np.asarray(region_ids, dtype=np.int64)
    order = np.lexsort((ids, -scores.astype(np.float64)))
    return ids[order], scores[order]


def build_index(regions, page_descs, vocab, model, cfg, pages, bundle_hash=""):
    """Inverted index: for each index bigram, regions by decreasing cosine similarity."""
    kept, emb = region_embeddings(regions, page_descs, vocab, model)
    return assemble_index(kept, emb, model, cfg, pages, bundle_hash)


def assemble_index(kept, emb, model, cfg, pages, bundle_hash=""):
    """Index from regions already embedded in the PHOB subspace (rows of ``emb``)."""
    ids = [r.id for r in kept]
    postings = {}
    for g in cfg.index_bigrams:
        # a lone bigram is far from the mean word label; centering it would
        # give every bigram query the same dominant direction
        q = embed_text(bigram_embedding(g, cfg), model, center=False)
        postings[g] = rank_postings(ids, emb @ q)
    return BigramInvertedIndex(list(cfg.index_bigrams), postings,
                               {r.id: r for r in kept}, list(pages), bundle_hash)


def lookup(index, bigram, n):
    if bigram not in index.postings:
        raise UnknownBigram(bigram)
    ids, scores = index.postings[bigram]
    n = max(0, n)
    return [(index.regions[int(i)], float(s)) for i, s in zip(ids[:n], scores[:n])]


INDEX_MAGIC = b"SPIX1"
INDEX_VERSION = 1
_REGION = struct.Struct("<IIiiiiiiiif")


def _pstr(buf, s):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _rstr(f):
    (n,) = struct.unpack("<H", f.read(2))
    return f.read(n).decode("utf-8")


def index_bytes(index):
    buf = io.BytesIO()
    buf.write(INDEX_MAGIC)
    buf.write(struct.pack("<I", INDEX_VERSION))
    buf.write(index.bundle_hash.encode("ascii").ljust(64, b"\0")[:64])
    buf.write(struct.pack("<I", len(index.pages)))
    page_no = {}
    for i, (pid, w, h) in enumerate(index.pages):
        page_no[pid] = i
        _pstr(buf, pid)
        buf.write(struct.pack("<II", w, h))
    regions = [index.regions[k] for k in sorted(index.regions)]
    buf.write(struct.pack("<I", len(regions)))
    for r in regions:
        buf.write(_REGION.pack(r.id, page_no[r.page_id], *r.box, *r.min_box, r.tag))
    buf.write(struct.pack("<I", len(index.bigrams)))
    for g in index.bigrams:
        ids, scores = index.postings[g]
        _pstr(buf, g)
        buf.write(struct.pack("<I", len(ids)))
        deltas = np.diff(np.asarray(ids, dtype=np.int64), prepend=0)
        buf.write(deltas.astype("<i4").tobytes())
        buf.write(np.asarray(scores, dtype="<f4").tobytes())
    return buf.getvalue()


def save_index(path, index):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(index_bytes(index))
    os.replace(tmp, path)


def load_index(path):
    with open(path, "rb") as fh:
        f = io.BytesIO(fh.read())
    if f.read(5) != INDEX_MAGIC:
        raise FormatError(f"{path}: not an index file")
    (version,) = struct.unpack("<I", f.read(4))
    if version != INDEX_VERSION:
        raise FormatError(f"{path}: unsupported index version {version}")
    bundle_hash = f.read(64).rstrip(b"\0").decode("ascii")
    (n_pages,) = struct.unpack("<I", f.read(4))
    pages = []
    for _ in range(n_pages):
        pid = _rstr(f)
        w, h = struct.unpack("<II", f.read(8))
        pages.append((pid, w, h))
    (n_regions,) = struct.unpack("<I", f.read(4))
    regions = {}
    for _ in range(n_regions):
        rid, pno, *vals = _REGION.unpack(f.read(_REGION.size))
        regions[rid] = Region(rid, pages[pno][0], tuple(vals[0:4]), tuple(vals[4:8]), vals[8])
    (n_bigrams,) = struct.unpack("<I", f.read(4))
    bigrams, postings = [], {}
    for _ in range(n_bigrams):
        g = _rstr(f)
        (n,) = struct.unpack("<I", f.read(4))
        deltas = np.frombuffer(f.read(4 * n), dtype="<i4").astype(np.int64)
        scores = np.frombuffer(f.read(4 * n), dtype="<f4").copy()
        bigrams.append(g)
        postings[g] = (np.cumsum(deltas), scores)
    return BigramInvertedIndex(bigrams, postings, regions, pages, bundle_hash)
