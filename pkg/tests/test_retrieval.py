import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wordspot.attributes import AttributeModel, embed_text
from wordspot.errors import MissingPageMap, NoKnownBigrams, QueryTooShort, UnsupportedCharacter
from wordspot.evaluation import iou
from wordspot.features import VisualVocabulary
from wordspot.integral import PageAttributeMap, build_integral
from wordspot.layout import BigramInvertedIndex, Region, rank_postings
from wordspot.retrieval import (Hit, QueryPlan, RankedResult, candidate_windows, nms,
                                plan_query, rerank, sliding_window_scan, widen_box)
from wordspot.text_embedding import PHOC, EmbeddingConfig, phoc_encode

CFG = EmbeddingConfig(alphabet="abcdeht", char_levels=(2,), word_bigrams=(),
                      index_bigrams=("th", "he", "aa", "ab"))


def toy_model(rng, d=3):
    a = len(CFG.alphabet) * 2
    return AttributeModel(rng.normal(size=(5, a)), rng.normal(size=(a, d)),
                          rng.normal(size=(a, d)), np.zeros(a), np.zeros(a), PHOC)


def toy_index(n_regions=6):
    regions = {i: Region(i, "p", (20 * i, 0, 10, 16), (20 * i, 0, 10, 16), 1.0)
               for i in range(n_regions)}
    rng = np.random.default_rng(0)
    postings = {g: rank_postings(list(regions), rng.random(n_regions)) for g in CFG.index_bigrams}
    return BigramInvertedIndex(list(CFG.index_bigrams), postings, regions, [("p", 200, 40)])


STATS = {"word_widths": {"the": 30.0}, "char_width": 10.0}


def test_plan_the():
    idx = toy_index()
    plan = plan_query("the", idx, STATS, 2, CFG)
    assert plan.bigrams == ["th", "he"] and len(plan.regions) <= 2 * 2
    assert len({r.id for r in plan.regions}) == len(plan.regions)
    expect = {int(i) for g in ("th", "he") for i in idx.postings[g][0][:2]}
    assert {r.id for r in plan.regions} == expect
    assert plan.word_width == 30.0
    for (_, box), r in zip(plan.boxes, plan.regions):
        assert box[2] >= 1.2 * 30 and box[0] >= 0 and box[0] + box[2] <= 200


def test_plan_single_bigram_and_fallback_width():
    plan = plan_query("aaaa", toy_index(), STATS, 3, CFG)
    assert plan.bigrams == ["aa"] and len(plan.regions) == 3
    assert plan.word_width == 40.0


def test_plan_errors():
    idx = toy_index()
    with pytest.raises(QueryTooShort):
        plan_query("a", idx, STATS, 3, CFG)
    with pytest.raises(NoKnownBigrams):
        plan_query("dc", idx, STATS, 3, CFG)
    with pytest.raises(UnsupportedCharacter):
        plan_query("t-h", idx, STATS, 3, CFG)


def test_unknown_bigrams_are_skipped():
    plan = plan_query("thd", toy_index(), STATS, 1, CFG)
    assert plan.bigrams == ["th"] and plan.skipped == ["hd"]


def test_widen_at_page_border():
    # target ceil(1.2 * 20) = 24; centred start 83 would overflow, so shift to 76
    assert widen_box((90, 0, 10, 10), 1.2 * 20, 100) == (76, 0, 24, 10)
    assert widen_box((40, 5, 10, 10), 24, 100) == (33, 5, 24, 10)
    assert widen_box((0, 0, 50, 10), 24, 100) == (0, 0, 50, 10)


def test_candidate_windows_stride_and_sizes():
    wins = candidate_windows((16, 8, 64, 16), (10, 20), 8, 40, factors=(0.8, 1.0))
    # span 8 blocks, sizes 4 and 5 -> 5 + 4 windows
    assert len(wins) == 9
    assert set(wins[:, 2].tolist()) == {4, 5} and set(wins[:, 3].tolist()) == {2}
    assert wins[:, 0].min() == 2 and (wins[:, 0] + wins[:, 2]).max() == 10


def scan_setup(seed=0, rows=4, cols=12, d=3):
    rng = np.random.default_rng(seed)
    model = toy_model(rng, d)
    q = embed_text(phoc_encode("the", CFG), model)
    values = rng.normal(size=(rows, cols, d))
    return model, q, values


def test_exact_window_ranks_first():
    model, q, _ = scan_setup()
    # blocks outside the target are orthogonal to q
    other = np.linalg.svd(q[None])[2][1]
    values = np.tile(other, (2, 12, 1))
    values[:, 3:8] = q
    integ = {"p": build_integral(PageAttributeMap("p", 8, values))}
    plan = QueryPlan("the", ["th"], [], 1, [], [("p", (0, 0, 96, 16))], 40.0)
    res = sliding_window_scan(plan, integ, {"p": (96, 16)}, model, CFG, 8, factors=(1.0,))
    assert res.hits[0].box == (24, 0, 40, 16)
    assert res.hits[0].score == pytest.approx(1.0, abs=1e-6)
    assert all(h.score < 1 - 1e-6 for h in res.hits[1:])


def brute_scan(values, q, box, block, sizes, pw, ph):
    x, y, w, h = box
    bx0, by0 = x // block, y // block
    bx1, by1 = -(-(x + w) // block), -(-(y + h) // block)
    out = []
    for s in sizes:
        for bx in range(bx0, bx1 - s + 1):
            v = values[by0:by1, bx:bx + s].sum((0, 1))
            n = np.linalg.norm(v)
            score = float(v @ q / n) if n > 0 else 0.0
            px = (bx * block, by0 * block, min(s * block, pw - bx * block),
                  min((by1 - by0) * block, ph - by0 * block))
            out.append((score, px))
    out.sort(key=lambda t: (-t[0],) + t[1])
    kept = []
    for score, px in out:
        if all(iou(px, k) <= 0.5 for _, k in kept):
            kept.append((score, px))
    return kept


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_scan_matches_direct_block_sums(seed):
    model, q, values = scan_setup(seed)
    integ = {"p": build_integral(PageAttributeMap("p", 8, values))}
    box = (8, 0, 80, 30)
    plan = QueryPlan("the", ["th"], [], 1, [], [("p", box)], 32.0)
    res = sliding_window_scan(plan, integ, {"p": (96, 30)}, model, CFG, 8, factors=(0.75, 1.0))
    expect = brute_scan(values, q, box, 8, [3, 4], 96, 30)
    assert [h.box for h in res.hits] == [px for _, px in expect]
    assert np.allclose([h.score for h in res.hits], [s for s, _ in expect], atol=1e-9)


def test_missing_page_map():
    model, _, _ = scan_setup()
    plan = QueryPlan("the", ["th"], [], 1, [], [("zz", (0, 0, 10, 10))], 10.0)
    with pytest.raises(MissingPageMap):
        sliding_window_scan(plan, {}, {}, model, CFG, 8)


def test_nms_keeps_better_overlapping_window():
    hits = [Hit("p", (0, 0, 100, 10), 0.8), Hit("p", (5, 0, 100, 10), 0.7),
            Hit("q", (5, 0, 100, 10), 0.6)]
    assert nms(hits) == [hits[0], hits[2]]


boxes = st.tuples(st.integers(0, 50), st.integers(0, 20), st.integers(1, 30), st.integers(1, 30))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("pq"), boxes, st.floats(-1, 1)), max_size=25))
def test_nms_idempotent_and_non_overlapping(raw):
    hits = sorted((Hit(p, b, s) for p, b, s in raw), key=lambda h: (-h.score, h.page_id) + h.box)
    once = nms(hits)
    assert nms(once) == once
    for i, a in enumerate(once):
        for b in once[i + 1:]:
            assert a.page_id != b.page_id or iou(a.box, b.box) <= 0.5


class FakeGrid:
    """Stands in for a page's reduced descriptor grid: descriptors depend on the box."""

    def window(self, box):
        rng = np.random.default_rng(sum(box))
        z = rng.normal(size=(20, 2))
        xy = np.stack([box[0] + rng.random(20) * box[2], box[1] + rng.random(20) * box[3]], 1)
        return z, xy


def rerank_setup(n=10):
    rng = np.random.default_rng(1)
    vocab = VisualVocabulary(np.zeros(128), np.eye(128)[:2], np.full(2, 0.5),
                             rng.normal(size=(2, 4)), np.ones((2, 4)), enriched=True)
    a = len(CFG.alphabet) * 2
    model = AttributeModel(rng.normal(size=(17, a)), rng.normal(size=(a, 3)),
                           rng.normal(size=(a, 3)), np.zeros(a), np.zeros(a), PHOC)
    hits = [Hit("p", (10 * i, 0, 30, 20), 1 - 0.05 * i, 1 - 0.05 * i) for i in range(n)]
    return vocab, model, RankedResult(hits)


def test_rerank_head_tail():
    vocab, model, initial = rerank_setup()
    out = rerank(initial, {"p": FakeGrid()}, vocab, model, "the", CFG, 60)
    assert out.stage == "reranked"
    assert sum(h.rescored for h in out.hits) == 6
    assert all(h.rescored for h in out.hits[:6])
    assert [h.box for h in out.hits[6:]] == [h.box for h in initial.hits[6:]]
    assert {h.box for h in out.hits} == {h.box for h in initial.hits}
    scores = [h.score for h in out.hits]
    assert all(a >= b for a, b in zip(scores, scores[1:]))
    assert [h.initial_score for h in out.hits[6:]] == [h.score for h in initial.hits[6:]]


def test_rerank_bounds():
    vocab, model, initial = rerank_setup(1)
    out = rerank(initial, {"p": FakeGrid()}, vocab, model, "the", CFG, 100)
    assert len(out) == 1 and out.hits[0].box == initial.hits[0].box
    for bad in (0, -5, 120):
        with pytest.raises(ValueError):
            rerank(initial, {"p": FakeGrid()}, vocab, model, "the", CFG, bad)
    assert math.ceil(60 / 100 * 10) == 6


def test_rerank_failure_keeps_initial_score():
    vocab, model, initial = rerank_setup(3)
    out = rerank(initial, {}, vocab, model, "the", CFG, 100)
    assert [h.score for h in out.hits] == [h.score for h in initial.hits]
    assert not any(h.rescored for h in out.hits)
