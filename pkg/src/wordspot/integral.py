"""Per-block attribute maps of a page and their integral images."""

import os
import struct
from dataclasses import dataclass

import numpy as np

from .attributes import l2_normalize
from .errors import FormatError, OutOfBounds
from .features import block_fisher_vectors


@dataclass
class PageAttributeMap:
    page_id: str
    block: int
    values: np.ndarray      # (rows, cols, d') block projections

    @property
    def shape(self):
        return self.values.shape[:2]

    @property
    def dims(self):
        return self.values.shape[2]


@dataclass
class IntegralAttributeImage:
    page_id: str
    block: int
    values: np.ndarray      # (rows + 1, cols + 1, d'), zero first row and column
    occupied: np.ndarray = None     # (rows + 1, cols + 1) integral count of non-empty blocks

    @property
    def shape(self):
        r, c, _ = self.values.shape
        return r - 1, c - 1


def build_page_map(page, vocab, model, block, step=4, scales=None, contrast=0.01,
                   page_id="", grid=None):
    """Project every non-empty block's Fisher vector into the PHOC subspace.

    Entries are the centered, unnormalized projections, so the sum over a
    window equals (block count) x the projection of the window's mean
    Fisher vector. Empty blocks stay zero.
    """
    if grid is None:
        kw = {} if scales is None else {"scales": scales}
        grid = block_fisher_vectors(page, vocab, block, step=step, contrast=contrast, **kw)
    rows, cols = grid.shape
    out = np.zeros((rows * cols, model.dims))
    if len(grid.index):
        out[grid.index] = model.project_images(grid.values)
    return PageAttributeMap(page_id, block, out.reshape(rows, cols, model.dims))


def build_integral(amap):
    if amap.values.size == 0:
        raise ValueError("empty page map")
    r, c, d = amap.values.shape
    values = np.zeros((r + 1, c + 1, d))
    values[1:, 1:] = np.asarray(amap.values, dtype=np.float64).cumsum(0).cumsum(1)
    occupied = np.zeros((r + 1, c + 1), dtype=np.int64)
    occupied[1:, 1:] = np.any(amap.values != 0, axis=2).cumsum(0).cumsum(1)
    return IntegralAttributeImage(amap.page_id, amap.block, values, occupied)


def window_sums(integral, boxes):
    """Unnormalized sums for block-unit boxes given as an (m, 4) array of (x, y, w, h)."""
    b = np.asarray(boxes, dtype=np.int64).reshape(-1, 4)
    rows, cols = integral.shape
    x0, y0 = b[:, 0], b[:, 1]
    x1, y1 = x0 + b[:, 2], y0 + b[:, 3]
    if np.any((x0 < 0) | (y0 < 0) | (x1 > cols) | (y1 > rows) | (b[:, 2] < 1) | (b[:, 3] < 1)):
        raise OutOfBounds("window outside the block grid")
    v = integral.values
    sums = v[y1, x1] - v[y0, x1] - v[y1, x0] + v[y0, x0]
    if integral.occupied is not None:
        # cancellation leaves round-off in all-empty windows; the exact count zeroes it
        o = integral.occupied
        sums[(o[y1, x1] - o[y0, x1] - o[y1, x0] + o[y0, x0]) == 0] = 0.0
    return sums


def window_embedding(integral, box):
    """Unit-norm subspace vector of a block-aligned window (zero stays zero)."""
    return l2_normalize(window_sums(integral, box)[0])


MAP_MAGIC = b"SPMP"
MAP_VERSION = 1
_HEADER = struct.Struct("<4sIIIII64s128s")
HEADER_SIZE = 256


def map_cache_name(page_id, bundle_hash, block):
    return f"{page_id}.{bundle_hash[:16]}.n{block}.map"


def save_page_map(path, amap, bundle_hash=""):
    """Fixed 256-byte header then float32 little-endian payload (row, col, channel)."""
    rows, cols = amap.shape
    head = _HEADER.pack(MAP_MAGIC, MAP_VERSION, amap.block, amap.dims, rows, cols,
                        bundle_hash.encode("ascii")[:64], amap.page_id.encode("utf-8")[:128])
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(head.ljust(HEADER_SIZE, b"\0"))
        f.write(np.ascontiguousarray(amap.values, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_page_map(path, mmap=False):
    with open(path, "rb") as f:
        head = f.read(HEADER_SIZE)
    if len(head) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated page map")
    magic, version, block, dims, rows, cols, bhash, pid = _HEADER.unpack(head[:_HEADER.size])
    if magic != MAP_MAGIC or version != MAP_VERSION:
        raise FormatError(f"{path}: not a version {MAP_VERSION} page map")
    shape = (rows, cols, dims)
    if mmap:
        values = np.memmap(path, dtype="<f4", mode="r", offset=HEADER_SIZE, shape=shape)
    else:
        values = np.fromfile(path, dtype="<f4", offset=HEADER_SIZE).reshape(shape)
    amap = PageAttributeMap(pid.rstrip(b"\0").decode("utf-8"), block, values)
    return amap, bhash.rstrip(b"\0").decode("ascii")
