"""Query execution: bigram lookup, region widening, window scoring, NMS, re-ranking."""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attributes import embed_image, embed_text, l2_normalize
from .errors import MissingPageMap, NoKnownBigrams, QueryTooShort
from .features import fisher_vector_reduced
from .integral import window_sums
from .layout import lookup
from .text_embedding import distinct_bigrams, normalize_text, phoc_encode

log = logging.getLogger(__name__)

WINDOW_FACTORS = (0.8, 1.0, 1.2)
INITIAL = "initial"
RERANKED = "reranked"


@dataclass
class QueryPlan:
    query: str
    bigrams: list           # distinct bigrams found in the index
    skipped: list           # distinct bigrams the index does not know
    n: int
    regions: list           # deduplicated candidate regions
    boxes: list             # (page id, widened box px), one per region
    word_width: float


@dataclass(frozen=True)
class Hit:
    page_id: str
    box: tuple
    score: float
    initial_score: float = None
    rescored: bool = False


@dataclass
class RankedResult:
    hits: list = field(default_factory=list)
    stage: str = INITIAL

    def __len__(self):
        return len(self.hits)


def expected_width(query, stats):
    """Mean training width of ``query``, else its length times the mean character width."""
    widths = stats.get("word_widths", {})
    if query in widths:
        return float(widths[query])
    return len(query) * float(stats["char_width"])


def widen_box(box, target, page_width):
    """Grow ``box`` symmetrically to ``target`` width, shifting inward at page edges."""
    x, y, w, h = box
    target = min(int(math.ceil(target)), page_width)
    if w >= target:
        return box
    x0 = x - (target - w) // 2
    x0 = min(max(x0, 0), page_width - target)
    return (int(x0), y, int(target), h)


def plan_query(query, index, stats, n, cfg, widen=1.2):
    query = normalize_text(query, cfg)
    if len(query) < 2:
        raise QueryTooShort(f"query {query!r} has fewer than 2 characters")
    grams = distinct_bigrams(query)
    known = [g for g in grams if g in index.postings]
    skipped = [g for g in grams if g not in index.postings]
    if skipped:
        log.warning("query %r: bigrams not in the index: %s", query, " ".join(skipped))
    if not known:
        raise NoKnownBigrams(f"none of the bigrams of {query!r} are indexed")
    seen, regions = set(), []
    for g in known:
        for region, _ in lookup(index, g, n):
            if region.id not in seen:
                seen.add(region.id)
                regions.append(region)
    width = expected_width(query, stats)
    boxes = []
    for r in regions:
        pw, _ = index.page_size(r.page_id)
        box = r.box if r.box[2] >= width else widen_box(r.box, widen * width, pw)
        boxes.append((r.page_id, box))
    return QueryPlan(query, known, skipped, n, regions, boxes, width)


def candidate_windows(box, grid_shape, block, width_px, factors=WINDOW_FACTORS):
    """Block-unit (x, y, w, h) windows sliding across ``box`` at one-block stride."""
    rows, cols = grid_shape
    x, y, w, h = box
    bx0, by0 = x // block, y // block
    bx1 = min(cols, -(-(x + w) // block))
    by1 = min(rows, -(-(y + h) // block))
    span, height = bx1 - bx0, by1 - by0
    if span < 1 or height < 1:
        return np.zeros((0, 4), dtype=np.int64)
    sizes = sorted({max(1, int(round(f * width_px / block))) for f in factors})
    fitting = [s for s in sizes if s <= span] or [span]
    out = [(bx, by0, s, height) for s in fitting for bx in range(bx0, bx1 - s + 1)]
    return np.array(out, dtype=np.int64)


def _sort_key(hit):
    return (-hit.score, hit.page_id) + tuple(hit.box)


def nms(hits, thresh=0.5):
    """Greedy suppression per page of hits overlapping a better one with IoU > ``thresh``.

    ``hits`` must already be in rank order.
    """
    by_page = {}
    for rank, h in enumerate(hits):
        by_page.setdefault(h.page_id, []).append(rank)
    keep = []
    for ranks in by_page.values():
        b = np.array([hits[r].box for r in ranks], dtype=np.float64)
        x0, y0 = b[:, 0], b[:, 1]
        x1, y1 = x0 + b[:, 2], y0 + b[:, 3]
        area = b[:, 2] * b[:, 3]
        order = np.arange(len(ranks))
        while order.size:
            i = order[0]
            keep.append(ranks[i])
            rest = order[1:]
            iw = np.maximum(0.0, np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest]))
            ih = np.maximum(0.0, np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest]))
            inter = iw * ih
            union = area[i] + area[rest] - inter
            ov = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
            order = rest[ov <= thresh]
    return [hits[r] for r in sorted(keep)]


def sliding_window_scan(plan, integrals, page_sizes, model, cfg, block,
                        factors=WINDOW_FACTORS, nms_thresh=0.5):
    """Score every window of every widened candidate box against the query.

    ``integrals`` maps page id to its integral attribute image; window
    scores are cosines between window and query vectors in the subspace.
    """
    q = embed_text(phoc_encode(plan.query, cfg), model)
    scored = {}
    for page_id, box in plan.boxes:
        if page_id not in integrals:
            raise MissingPageMap(f"no attribute map for page {page_id}")
        integral = integrals[page_id]
        wins = candidate_windows(box, integral.shape, block, plan.word_width, factors)
        if not len(wins):
            continue
        scores = l2_normalize(window_sums(integral, wins)) @ q
        pw, ph = page_sizes[page_id]
        for (bx, by, bw, bh), s in zip(wins.tolist(), scores.tolist()):
            x0, y0 = bx * block, by * block
            px = (x0, y0, min(bw * block, pw - x0), min(bh * block, ph - y0))
            scored[(page_id, px)] = s
    hits = sorted((Hit(p, b, s, s) for (p, b), s in scored.items()), key=_sort_key)
    return RankedResult(nms(hits, nms_thresh), INITIAL)


def rescore_window(grid, box, vocab, model, query_vec):
    """Cosine between the query and the enriched Fisher vector of ``box``.

    ``grid`` is the page's :class:`ReducedDescriptorGrid` for ``vocab``.
    """
    z, xy = grid.window(box)
    fv = fisher_vector_reduced(z, xy, vocab, region=box)
    return float(embed_image(fv, model) @ query_vec)


def rerank(initial, grids, vocab, model, query, cfg, top_percent):
    """Re-score the top ``top_percent`` % of ``initial`` with enriched Fisher vectors.

    ``grids`` maps page id to its fine-step :class:`ReducedDescriptorGrid`.
    The re-scored head is re-sorted and always precedes the tail, which
    keeps its order; tail scores are capped at the lowest head score so the
    list stays non-increasing (``initial_score`` keeps the original).
    """
    if not 0 < top_percent <= 100:
        raise ValueError("top_percent must be in (0, 100]")
    hits = initial.hits
    n_head = int(math.ceil(top_percent / 100.0 * len(hits) - 1e-9))
    q = embed_text(phoc_encode(query, cfg), model)
    head = []
    for rank, h in enumerate(hits[:n_head]):
        try:
            s = rescore_window(grids[h.page_id], h.box, vocab, model, q)
            head.append((replace(h, score=s, rescored=True), rank))
        except Exception as e:  # noqa: BLE001 - keep the candidate, flag it
            log.warning("re-ranking %s %s failed: %s", h.page_id, h.box, e)
            head.append((h, rank))
    head.sort(key=lambda hr: (-hr[0].score, hr[1]))
    out = [h for h, _ in head]
    floor = out[-1].score if out else math.inf
    out += [replace(h, score=min(h.score, floor)) for h in hits[n_head:]]
    return RankedResult(out, RERANKED)
