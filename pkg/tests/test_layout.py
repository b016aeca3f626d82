import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wordspot.errors import FormatError, UnknownBigram
from wordspot.layout import (BigramInvertedIndex, Region, binarize, index_bytes, load_index,
                             lookup, minimal_box, propose_regions, rank_postings, save_index)


def test_binarize_threshold():
    img = np.array([[0, 200], [200, 200]], dtype=np.uint8)
    assert binarize(img).sum() == 1
    assert not binarize(np.full((5, 7), 0.4)).any()
    assert binarize(np.zeros((3, 4))).shape == (3, 4)
    assert np.array_equal(binarize(img), binarize(img / 255.0))


def test_two_far_blobs_make_two_regions():
    b = np.zeros((40, 120), bool)
    b[10:20, 5:25] = True
    b[25:35, 80:100] = True
    regions = propose_regions(b, gap_thresholds=[5, 10])
    assert sorted(r.box for r in regions) == [(5, 10, 20, 10), (80, 25, 20, 10)]


def descender_page():
    b = np.zeros((50, 70), bool)
    b[10:30, 10:30] = True          # body of A
    b[30:36, 29] = True             # tail going down ...
    b[35, 29:46] = True             # ... and right, under B
    b[10:20, 40:60] = True          # B
    return b


def test_descender_overlap_does_not_merge():
    regions = propose_regions(descender_page(), gap_thresholds=[2])
    assert len(regions) == 2
    a = next(r for r in regions if r.box[0] == 10)
    bb = next(r for r in regions if r.box[0] == 40)
    # full boxes overlap, minimal boxes do not
    assert a.box[0] + a.box[2] > bb.box[0] and a.box[1] < bb.box[1] + bb.box[3]
    assert a.min_box[0] + a.min_box[2] <= bb.min_box[0]


def test_minimal_box_sheds_thin_tail():
    mask = np.zeros((26, 36), bool)
    mask[0:20, 0:20] = True
    mask[20:26, 19] = True
    mask[25, 19:36] = True
    x, y, w, h = minimal_box(mask)
    assert x + w <= 20 and y + h <= 20
    assert mask[y:y + h, x:x + w].sum() > 0.9 * mask.sum()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_minimal_box_contract(seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((rng.integers(1, 15), rng.integers(1, 15))) < 0.6
    if not mask.any():
        return
    x, y, w, h = minimal_box(mask)
    assert 0 <= x and 0 <= y and x + w <= mask.shape[1] and y + h <= mask.shape[0]
    assert w >= 1 and h >= 1
    assert mask[y:y + h, x:x + w].sum() > 0.9 * mask.sum() or (w, h) == mask.shape[::-1]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(1, 10), st.floats(10, 30))
def test_union_over_thresholds_is_monotone(seed, t, t2):
    rng = np.random.default_rng(seed)
    b = np.zeros((60, 160), bool)
    for _ in range(8):
        y, x = rng.integers(0, 50), rng.integers(0, 150)
        b[y:y + rng.integers(2, 10), x:x + rng.integers(2, 10)] = True
    small = {r.box for r in propose_regions(b, gap_thresholds=[t])}
    both = propose_regions(b, gap_thresholds=[t, t2])
    assert small <= {r.box for r in both}
    assert len({r.box for r in both}) == len(both)
    for r in both:
        x, y, w, h = r.box
        mx, my, mw, mh = r.min_box
        assert x <= mx and y <= my and mx + mw <= x + w and my + mh <= y + h
        assert x >= 0 and y >= 0 and x + w <= 160 and y + h <= 60


def test_blank_page_has_no_regions():
    assert propose_regions(np.zeros((20, 20), bool)) == []


def test_default_thresholds_from_component_height():
    b = np.zeros((30, 200), bool)
    for x in (10, 30, 50, 120):
        b[5:15, x:x + 10] = True
    # median height 10 -> thresholds 5, 10, 15; gaps are 10, 10 and 60
    boxes = {r.box for r in propose_regions(b)}
    assert (10, 5, 50, 10) in boxes and (120, 5, 10, 10) in boxes
    assert (10, 5, 10, 10) in boxes          # threshold 5 keeps them apart


def test_rank_postings_order():
    ids, scores = rank_postings([1, 2, 3], [0.9, 0.1, 0.5])
    assert ids.tolist() == [1, 3, 2]
    ids, _ = rank_postings([7, 3, 5], [0.5, 0.5, 0.2])
    assert ids.tolist() == [3, 7, 5]
    assert scores.dtype == np.float32


def toy_index():
    regions = {i: Region(i, "p1" if i < 2 else "p2", (i, 0, 5, 5), (i, 0, 4, 4), 3.0)
               for i in range(4)}
    postings = {"th": rank_postings([0, 1, 2, 3], [0.4, 0.9, -0.2, 0.1]),
                "he": rank_postings([0, 1, 2, 3], [0.3, 0.3, 0.3, 0.8])}
    return BigramInvertedIndex(["th", "he"], postings, regions,
                               [("p1", 100, 50), ("p2", 80, 40)], "f" * 64)


def test_lookup():
    idx = toy_index()
    assert [r.id for r, _ in lookup(idx, "th", 2)] == [1, 0]
    assert len(lookup(idx, "th", 99)) == 4
    assert lookup(idx, "th", 0) == []
    assert lookup(idx, "he", 3) == lookup(idx, "he", 3)
    with pytest.raises(UnknownBigram):
        lookup(idx, "zz", 1)


def test_index_round_trip(tmp_path):
    idx = toy_index()
    path = tmp_path / "x.spix"
    save_index(path, idx)
    raw = path.read_bytes()
    assert raw[:5] == b"SPIX1" and raw == index_bytes(idx)
    back = load_index(path)
    assert back.bigrams == idx.bigrams and back.pages == idx.pages
    assert back.regions == idx.regions and back.bundle_hash == idx.bundle_hash
    for g in idx.bigrams:
        assert back.postings[g][0].tolist() == idx.postings[g][0].tolist()
        assert np.array_equal(back.postings[g][1], idx.postings[g][1])
    assert index_bytes(back) == raw
    (tmp_path / "bad").write_bytes(b"SPOT1xxxx")
    with pytest.raises(FormatError):
        load_index(tmp_path / "bad")
