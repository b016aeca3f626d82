import numpy as np
import pytest

from wordspot.attributes import AttributeModel, l2_normalize
from wordspot.errors import FormatError, OutOfBounds
from wordspot.features import BlockFisherGrid
from wordspot.integral import (PageAttributeMap, build_integral, build_page_map, load_page_map,
                               map_cache_name, save_page_map, window_embedding, window_sums)
from wordspot.text_embedding import PHOC


def random_map(rng, rows=12, cols=20, dims=16):
    return PageAttributeMap("p", 8, rng.normal(size=(rows, cols, dims)))


def test_window_sums_match_direct_sums():
    rng = np.random.default_rng(0)
    amap = random_map(rng)
    ii = build_integral(amap)
    for _ in range(200):
        w, h = rng.integers(1, 21), rng.integers(1, 13)
        x, y = rng.integers(0, 21 - w), rng.integers(0, 13 - h)
        direct = amap.values[y:y + h, x:x + w].sum((0, 1))
        assert np.allclose(window_sums(ii, [(x, y, w, h)])[0], direct, rtol=1e-10, atol=1e-10)
        assert np.allclose(window_embedding(ii, (x, y, w, h)), l2_normalize(direct))


def test_zero_window_stays_zero():
    amap = PageAttributeMap("p", 8, np.zeros((3, 3, 4)))
    assert not window_embedding(build_integral(amap), (0, 0, 3, 3)).any()


def test_out_of_bounds():
    ii = build_integral(random_map(np.random.default_rng(1), 4, 5, 2))
    for box in [(-1, 0, 2, 2), (0, 0, 6, 1), (0, 3, 1, 2), (0, 0, 0, 1)]:
        with pytest.raises(OutOfBounds):
            window_sums(ii, [box])


def test_page_map_projects_block_vectors_and_keeps_empty_blocks_zero():
    rng = np.random.default_rng(2)
    values = rng.normal(size=(3, 6))
    grid = BlockFisherGrid((2, 3), 8, np.array([0, 2, 5]), values, 6)
    model = AttributeModel(rng.normal(size=(7, 5)), rng.normal(size=(5, 4)),
                           rng.normal(size=(5, 4)), rng.normal(size=5), np.zeros(5), PHOC)
    amap = build_page_map(None, None, model, 8, grid=grid)
    flat = amap.values.reshape(6, 4)
    assert not flat[[1, 3, 4]].any()
    expect = (np.hstack([values, np.ones((3, 1))]) @ model.W - model.img_mean) @ model.U_img
    assert np.allclose(flat[[0, 2, 5]], expect)
    # a window sum is the block count times the projection of the mean block feature
    ii = build_integral(amap)
    mean_proj = model.project_images(values.mean(0))[0]
    assert np.allclose(window_sums(ii, [(0, 0, 3, 2)])[0], 3 * mean_proj)


def test_map_cache_round_trip(tmp_path):
    amap = random_map(np.random.default_rng(3), 5, 7, 3)
    name = map_cache_name("page01", "ab" * 32, 8)
    assert "page01" in name and "n8" in name
    path = tmp_path / name
    save_page_map(path, amap, "ab" * 32)
    for mm in (False, True):
        back, h = load_page_map(path, mmap=mm)
        assert h == "ab" * 32 and back.page_id == "p" and back.block == 8
        assert np.array_equal(np.asarray(back.values), amap.values.astype(np.float32))
    raw = path.read_bytes()
    assert raw[:4] == b"SPMP" and len(raw) == 256 + 5 * 7 * 3 * 4
    (tmp_path / "junk.map").write_bytes(b"nope")
    with pytest.raises(FormatError):
        load_page_map(tmp_path / "junk.map")


def test_empty_window_inside_busy_page_is_exactly_zero():
    rng = np.random.default_rng(3)
    values = rng.normal(size=(6, 9, 5)) * 1e3
    values[2:4, 3:6] = 0.0
    ii = build_integral(PageAttributeMap("p", 8, values))
    assert not window_sums(ii, [(3, 2, 3, 2)]).any()
    assert not window_embedding(ii, (4, 3, 1, 1)).any()
