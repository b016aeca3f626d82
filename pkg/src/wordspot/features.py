"""Dense gradient-histogram descriptors, GMM vocabularies and Fisher vectors."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse

from .errors import DimensionMismatch, ImageTooSmall, InsufficientData

log = logging.getLogger(__name__)

N_ORIENT = 8
N_CELLS = 4
DESC_DIM = N_CELLS * N_CELLS * N_ORIENT
DEFAULT_SCALES = (8, 12, 16, 24)


def as_float_image(image):
    """Grayscale image as float64 in [0, 1] (8-bit input is rescaled)."""
    arr = np.asarray(image)
    img = arr.astype(np.float64)
    if img.ndim != 2:
        raise ValueError("expected a 2-D grayscale image")
    if np.issubdtype(arr.dtype, np.integer) or (img.size and img.max() > 2.0):
        img = img / 255.0
    return img


class OrientationField:
    """Integral images of soft-binned gradient orientations for one image.

    Descriptors for any box and grid step can be sampled from it without
    touching the pixels again.
    """

    def __init__(self, image, sigma=1.0):
        img = as_float_image(image)
        if img.ndim != 2 or min(img.shape) < 2:
            raise ImageTooSmall(f"image shape {img.shape} too small")
        self.height, self.width = img.shape
        if sigma > 0:
            img = ndimage.gaussian_filter(img, sigma, mode="nearest")
        gy, gx = np.gradient(img)
        mag = np.hypot(gx, gy)
        ori = np.mod(np.arctan2(gy, gx), 2 * np.pi) * (N_ORIENT / (2 * np.pi))
        lo = np.floor(ori).astype(np.int64) % N_ORIENT
        frac = ori - np.floor(ori)
        hi = (lo + 1) % N_ORIENT
        integral = np.zeros((self.height + 1, self.width + 1, N_ORIENT))
        for b in range(N_ORIENT):
            chan = np.where(lo == b, mag * (1 - frac), 0.0) + np.where(hi == b, mag * frac, 0.0)
            integral[1:, 1:, b] = chan.cumsum(0).cumsum(1)
        self.integral = integral

    @property
    def shape(self):
        return self.height, self.width


@dataclass
class DenseDescriptorSet:
    xy: np.ndarray          # (M, 2) patch centers, px
    scale: np.ndarray       # (M,) patch widths, px
    vectors: np.ndarray     # (M, 128)
    size: tuple             # (w, h) of the source image

    def __len__(self):
        return len(self.vectors)

    def nonzero(self):
        keep = np.any(self.vectors != 0, axis=1)
        return DenseDescriptorSet(self.xy[keep], self.scale[keep], self.vectors[keep], self.size)

    def in_box(self, box):
        x, y, w, h = box
        cx, cy = self.xy[:, 0], self.xy[:, 1]
        keep = (cx >= x) & (cx < x + w) & (cy >= y) & (cy < y + h)
        return DenseDescriptorSet(self.xy[keep], self.scale[keep], self.vectors[keep], self.size)

    @classmethod
    def concat(cls, sets, size):
        sets = list(sets)
        if not sets:
            return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, DESC_DIM), np.float32), size)
        return cls(np.concatenate([s.xy for s in sets]), np.concatenate([s.scale for s in sets]),
                   np.concatenate([s.vectors for s in sets]), size)


def grid_centers(lo, hi, step, patch, limit):
    """Grid coordinates in [lo, hi) whose patch lies inside [0, limit)."""
    half = patch // 2
    start = step // 2
    first = max(lo, half)
    first = start + int(np.ceil((first - start) / step)) * step
    last = min(hi - 1, limit - (patch - half))
    if last < first:
        return np.zeros(0, dtype=np.int64)
    return np.arange(first, last + 1, step, dtype=np.int64)


def dense_descriptors(field, step=4, scales=DEFAULT_SCALES, box=None,
                      contrast=0.01, drop_flat=False):
    """Sample descriptors on the global grid ``step//2 + k*step``.

    Only centers inside ``box`` (default: whole image) whose patch fits in
    the image are used. Patches with mean gradient magnitude below
    ``contrast`` are flat and get a zero vector.
    """
    if step < 1:
        raise ValueError("step must be >= 1")
    H, W = field.shape
    if min(H, W) < min(scales):
        raise ImageTooSmall(f"image {W}x{H} smaller than the smallest patch {min(scales)}")
    bx, by, bw, bh = box if box is not None else (0, 0, W, H)
    ii = field.integral
    xys, scs, vecs = [], [], []
    for patch in scales:
        xs = grid_centers(bx, bx + bw, step, patch, W)
        ys = grid_centers(by, by + bh, step, patch, H)
        if len(xs) == 0 or len(ys) == 0:
            continue
        cell = patch / N_CELLS
        half = patch // 2
        # cell edges relative to patch origin
        edges = np.round(np.arange(N_CELLS + 1) * cell).astype(np.int64)
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        ox = (gx - half).ravel()
        oy = (gy - half).ravel()
        desc = np.empty((len(ox), N_CELLS, N_CELLS, N_ORIENT))
        for a in range(N_CELLS):
            y0, y1 = oy + edges[a], oy + edges[a + 1]
            for b in range(N_CELLS):
                x0, x1 = ox + edges[b], ox + edges[b + 1]
                desc[:, a, b] = ii[y1, x1] - ii[y0, x1] - ii[y1, x0] + ii[y0, x0]
        desc = desc.reshape(len(ox), DESC_DIM)
        mass = desc.sum(1) / float(patch * patch)
        flat = mass < contrast
        desc[flat] = 0.0
        desc = _sift_normalize(desc)
        if drop_flat:
            keep = ~flat
            desc, ox, oy = desc[keep], ox[keep], oy[keep]
        xys.append(np.stack([ox + half, oy + half], 1).astype(np.float64))
        scs.append(np.full(len(desc), float(patch)))
        vecs.append(desc.astype(np.float32))
    if not vecs:
        return DenseDescriptorSet(np.zeros((0, 2)), np.zeros(0),
                                  np.zeros((0, DESC_DIM), np.float32), (W, H))
    return DenseDescriptorSet(np.concatenate(xys), np.concatenate(scs),
                              np.concatenate(vecs), (W, H))


def _sift_normalize(desc):
    norm = np.linalg.norm(desc, axis=1, keepdims=True)
    out = np.divide(desc, norm, out=np.zeros_like(desc), where=norm > 0)
    np.minimum(out, 0.2, out=out)
    norm = np.linalg.norm(out, axis=1, keepdims=True)
    return np.divide(out, norm, out=np.zeros_like(out), where=norm > 0)


def extract_dense_descriptors(image, step=4, scales=DEFAULT_SCALES, contrast=0.01):
    return dense_descriptors(OrientationField(image), step, scales, contrast=contrast)


@dataclass
class VisualVocabulary:
    pca_mean: np.ndarray        # (128,)
    pca_components: np.ndarray  # (D_red, 128), orthonormal rows
    weights: np.ndarray         # (K,)
    means: np.ndarray           # (K, D)
    variances: np.ndarray       # (K, D)
    enriched: bool = False
    converged: bool = True

    @property
    def n_components(self):
        return len(self.weights)

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def fv_dim(self):
        return 2 * self.n_components * self.dim

    def reduce(self, vectors):
        return (np.asarray(vectors, np.float64) - self.pca_mean) @ self.pca_components.T


def fit_pca(x, n_dims):
    mean = x.mean(0)
    _, _, vt = np.linalg.svd(x - mean, full_matrices=False)
    comps = vt[:n_dims]
    # sign convention: largest entry of each component positive
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(1)])
    return mean, comps * signs[:, None]


def gmm_log_resp(x, weights, means, variances):
    """Per-sample log posteriors (M, K) and log-likelihoods (M,)."""
    prec = 1.0 / variances
    logdet = np.log(variances).sum(1)
    d = x.shape[1]
    quad = (x ** 2) @ prec.T - 2 * x @ (means * prec).T + (means ** 2 * prec).sum(1)
    logp = -0.5 * (quad + logdet + d * np.log(2 * np.pi)) + np.log(weights)
    mx = logp.max(1, keepdims=True)
    ll = mx[:, 0] + np.log(np.exp(logp - mx).sum(1))
    return logp - ll[:, None], ll


def fit_gmm(x, k, seed=0, max_iter=100, tol=1e-5, var_floor=1e-4):
    """Diagonal GMM by EM with k-means++ style seeding.

    Returns ``(weights, means, variances, converged)``.
    """
    rng = np.random.default_rng(seed)
    n, d = x.shape
    floor = var_floor * x.var(0).mean()
    # k-means++ seeding then a few Lloyd steps
    centers = [x[rng.integers(n)]]
    dist = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        p = dist / dist.sum() if dist.sum() > 0 else None
        centers.append(x[rng.choice(n, p=p)])
        dist = np.minimum(dist, ((x - centers[-1]) ** 2).sum(1))
    means = np.array(centers)
    for _ in range(10):
        d2 = (x ** 2).sum(1)[:, None] - 2 * x @ means.T + (means ** 2).sum(1)
        lab = d2.argmin(1)
        for j in range(k):
            if np.any(lab == j):
                means[j] = x[lab == j].mean(0)
    variances = np.tile(np.maximum(x.var(0), floor), (k, 1))
    weights = np.full(k, 1.0 / k)
    prev = -np.inf
    converged = False
    for _ in range(max_iter):
        log_r, ll = gmm_log_resp(x, weights, means, variances)
        r = np.exp(log_r)
        nk = r.sum(0) + 1e-10
        weights = nk / n
        means = (r.T @ x) / nk[:, None]
        variances = np.maximum((r.T @ (x ** 2)) / nk[:, None] - means ** 2, floor)
        cur = ll.mean()
        if np.isfinite(prev) and abs(cur - prev) <= tol * abs(prev):
            converged = True
            break
        prev = cur
    weights = weights / weights.sum()
    return weights, means, variances, converged


def _coords(desc, region):
    x, y, w, h = region if region is not None else (0, 0) + tuple(desc.size)
    return np.stack([(desc.xy[:, 0] - x) / w - 0.5, (desc.xy[:, 1] - y) / h - 0.5], 1)


def fit_vocabulary(samples, d_red=62, k=16, seed=0, enrich=False, regions=None,
                   pca=None, max_samples=60000):
    """Fit PCA (unless ``pca`` is given) and a diagonal GMM on pooled descriptors.

    With ``enrich`` the reduced descriptors get their (x, y) position,
    normalized to ``regions[i]`` (default: each sample's full image), appended.
    """
    if d_red > DESC_DIM:
        raise ValueError("d_red must be <= 128")
    regions = regions if regions is not None else [None] * len(samples)
    keeps = [np.any(s.vectors != 0, axis=1) for s in samples]
    total = int(sum(k_.sum() for k_ in keeps))
    if total < 10 * k:
        raise InsufficientData(f"{total} descriptors, need at least {10 * k}")
    # subsample before pooling so large corpora stay in memory
    rng = np.random.default_rng(seed)
    chosen = np.ones(total, bool)
    if total > max_samples:
        chosen[:] = False
        chosen[rng.choice(total, max_samples, replace=False)] = True
    raw, coords, off = [], [], 0
    for s, reg, keep in zip(samples, regions, keeps):
        n = int(keep.sum())
        sel = np.flatnonzero(keep)[chosen[off:off + n]]
        off += n
        raw.append(s.vectors[sel].astype(np.float64))
        if enrich:
            coords.append(_coords(s, reg)[sel])
    x = np.concatenate(raw)
    if pca is None:
        pca = fit_pca(x, d_red)
    mean, comps = pca
    z = (x - mean) @ comps.T
    if enrich:
        z = np.hstack([z, np.concatenate(coords)])
    weights, means, variances, converged = fit_gmm(z, k, seed=seed)
    if not converged:
        log.warning("EM did not converge in the iteration budget; using last estimate")
    return VisualVocabulary(mean, comps, weights, means, variances, enrich, converged)


@dataclass
class FisherVector:
    values: np.ndarray
    empty: bool = False

    def __len__(self):
        return len(self.values)


_CHUNK = 8192


def _fv_stats(z, r, groups, n_groups):
    """Zeroth, first and second order posterior-weighted sums per group."""
    M, K = r.shape
    D = z.shape[1]
    if n_groups == 1:
        return r.sum(0)[None], (r.T @ z)[None], (r.T @ (z * z))[None]
    s0 = np.zeros((n_groups, K))
    s1 = np.zeros((n_groups, K * D))
    s2 = np.zeros((n_groups, K * D))
    for lo in range(0, M, _CHUNK):
        hi = min(M, lo + _CHUNK)
        agg = sparse.csr_matrix((np.ones(hi - lo), (groups[lo:hi], np.arange(hi - lo))),
                                shape=(n_groups, hi - lo))
        rc, zc = r[lo:hi], z[lo:hi]
        s0 += agg @ rc
        s1 += agg @ (rc[:, :, None] * zc[:, None, :]).reshape(hi - lo, K * D)
        s2 += agg @ (rc[:, :, None] * (zc * zc)[:, None, :]).reshape(hi - lo, K * D)
    return s0, s1.reshape(n_groups, K, D), s2.reshape(n_groups, K, D)


def _fv_encode(z, vocab, groups, n_groups, normalize=True):
    """Fisher vectors for rows of ``z`` grouped by ``groups`` (ints in [0, n_groups))."""
    K, D = vocab.means.shape
    out = np.zeros((n_groups, 2, K, D))
    counts = np.bincount(groups, minlength=n_groups).astype(np.float64)
    if len(z):
        log_r, _ = gmm_log_resp(z, vocab.weights, vocab.means, vocab.variances)
        s0, s1, s2 = _fv_stats(z, np.exp(log_r), groups, n_groups)
        m, var = vocab.means[None], vocab.variances[None]
        s0 = s0[:, :, None]
        out[:, 0] = (s1 - s0 * m) / np.sqrt(var)
        out[:, 1] = (s2 - 2 * m * s1 + m * m * s0) / var - s0
        out[:, 0] /= np.sqrt(vocab.weights)[None, :, None]
        out[:, 1] /= np.sqrt(2 * vocab.weights)[None, :, None]
        safe = np.maximum(counts, 1.0)
        out /= safe[:, None, None, None]
    out = out.reshape(n_groups, 2 * K * D)
    if normalize:
        out = np.sign(out) * np.sqrt(np.abs(out))
        norm = np.linalg.norm(out, axis=1, keepdims=True)
        out = np.divide(out, norm, out=np.zeros_like(out), where=norm > 0)
    return out, counts == 0


def _prepare(desc, vocab, enrich, region):
    keep = np.any(desc.vectors != 0, axis=1)
    if desc.vectors.shape[1] != len(vocab.pca_mean):
        raise DimensionMismatch("descriptor length does not match the vocabulary PCA")
    z = vocab.reduce(desc.vectors[keep])
    if enrich:
        z = np.hstack([z, _coords(desc, region)[keep]])
    if z.shape[1] != vocab.dim:
        raise DimensionMismatch(f"reduced descriptors have {z.shape[1]} dims, vocabulary {vocab.dim}")
    return z, keep


def fisher_vector(desc, vocab, enrich=False, region=None, normalize=True):
    """Improved Fisher vector (mean and variance gradients) of a descriptor set.

    Flat (all-zero) descriptors are ignored; a set without informative
    descriptors gives the zero vector flagged ``empty``.
    """
    if enrich != vocab.enriched:
        raise DimensionMismatch("enrich flag does not match the vocabulary")
    z, _ = _prepare(desc, vocab, enrich, region)
    values, empty = _fv_encode(z, vocab, np.zeros(len(z), dtype=np.int64), 1, normalize)
    return FisherVector(values[0], bool(empty[0]))


def fisher_vector_reduced(z, xy, vocab, region=None, normalize=True):
    """Fisher vector from descriptors already reduced by ``vocab``'s PCA.

    ``xy`` gives descriptor centers; with an enriched vocabulary they are
    normalized to ``region`` and appended, as in :func:`fisher_vector`.
    """
    z = np.asarray(z, dtype=np.float64)
    if vocab.enriched:
        x, y, w, h = region
        z = np.hstack([z, np.stack([(xy[:, 0] - x) / w - 0.5, (xy[:, 1] - y) / h - 0.5], 1)])
    if z.shape[1] != vocab.dim:
        raise DimensionMismatch(f"reduced descriptors have {z.shape[1]} dims, vocabulary {vocab.dim}")
    values, empty = _fv_encode(z, vocab, np.zeros(len(z), dtype=np.int64), 1, normalize)
    return FisherVector(values[0], bool(empty[0]))


class ReducedDescriptorGrid:
    """PCA-reduced descriptors of a whole image on the global grid, one array per scale.

    Any box's descriptor set is a slice, so many overlapping windows can be
    encoded without re-sampling the image.
    """

    def __init__(self, field, vocab, step=2, scales=DEFAULT_SCALES, contrast=0.01):
        self.size = (field.width, field.height)
        self.dim = vocab.pca_components.shape[0]
        self.layers = []
        for patch in scales:
            xs = grid_centers(0, field.width, step, patch, field.width)
            ys = grid_centers(0, field.height, step, patch, field.height)
            if not len(xs) or not len(ys):
                continue
            rows = []
            # sample a band of rows at a time to bound temporaries
            band = max(1, 4096 // len(xs))
            for i in range(0, len(ys), band):
                y0, y1 = ys[i], ys[min(len(ys), i + band) - 1] + 1
                d = dense_descriptors(field, step, (patch,), box=(0, y0, field.width, y1 - y0),
                                      contrast=contrast)
                z = vocab.reduce(d.vectors).astype(np.float32)
                z[~np.any(d.vectors != 0, axis=1)] = np.nan
                rows.append(z)
            z = np.concatenate(rows).reshape(len(ys), len(xs), -1)
            self.layers.append((xs, ys, z))

    def window(self, box):
        """Reduced vectors and centers of the informative descriptors centred in ``box``."""
        x, y, w, h = box
        zs, xys = [], []
        for xs, ys, z in self.layers:
            c0, c1 = np.searchsorted(xs, [x, x + w])
            r0, r1 = np.searchsorted(ys, [y, y + h])
            sub = z[r0:r1, c0:c1]
            keep = ~np.isnan(sub[..., 0])
            gy, gx = np.nonzero(keep)
            zs.append(sub[keep])
            xys.append(np.stack([xs[c0 + gx], ys[r0 + gy]], 1).astype(np.float64))
        if not zs:
            return np.zeros((0, self.dim)), np.zeros((0, 2))
        return np.concatenate(zs), np.concatenate(xys)


@dataclass
class BlockFisherGrid:
    """Fisher vectors of the N x N blocks of a page.

    Only non-empty blocks are stored: ``index`` holds their flat (row-major)
    block ids and ``values`` the matching rows.
    """
    shape: tuple            # (rows, cols)
    block: int
    index: np.ndarray
    values: np.ndarray
    fv_dim: int

    def dense(self):
        out = np.zeros((self.shape[0] * self.shape[1], self.fv_dim))
        out[self.index] = self.values
        return out.reshape(self.shape + (self.fv_dim,))

    def empty_mask(self):
        mask = np.ones(self.shape[0] * self.shape[1], dtype=bool)
        mask[self.index] = False
        return mask.reshape(self.shape)

    def __getitem__(self, rc):
        r, c = rc
        flat = r * self.shape[1] + c
        pos = np.searchsorted(self.index, flat)
        if pos < len(self.index) and self.index[pos] == flat:
            return FisherVector(self.values[pos], False)
        return FisherVector(np.zeros(self.fv_dim), True)


def block_ids(xy, block, cols):
    bx = (xy[:, 0] // block).astype(np.int64)
    by = (xy[:, 1] // block).astype(np.int64)
    return by * cols + bx


def grid_shape(width, height, block):
    return (-(-height // block), -(-width // block))


def block_fisher_vectors(page, vocab, block, step=4, scales=DEFAULT_SCALES,
                         contrast=0.01, desc=None):
    """One unenriched Fisher vector per ``block`` x ``block`` tile of ``page``.

    ``page`` is an image or an :class:`OrientationField`; a precomputed
    page descriptor set can be passed as ``desc``.
    """
    if block < step:
        raise ValueError("block size must be >= descriptor step")
    field = page if isinstance(page, OrientationField) else OrientationField(page)
    H, W = field.shape
    if desc is None:
        desc = dense_descriptors(field, step, scales, contrast=contrast, drop_flat=True)
    rows, cols = grid_shape(W, H, block)
    z, keep = _prepare(desc, vocab, False, None)
    groups = block_ids(desc.xy[keep], block, cols)
    used = np.unique(groups)
    remap = np.searchsorted(used, groups)
    values, _ = _fv_encode(z, vocab, remap, len(used))
    return BlockFisherGrid((rows, cols), block, used, values, vocab.fv_dim)
