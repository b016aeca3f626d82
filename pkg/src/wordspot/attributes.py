"""Attribute classifiers and the CCA calibration into a common subspace."""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import InsufficientPairs, KindMismatch, NumericalFailure, ShapeMismatch

log = logging.getLogger(__name__)


def augment(x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return np.hstack([x, np.ones((len(x), 1))])


def train_attribute_svms(features, labels, reg=1e-4, epochs=20, batch=16, seed=0):
    """Linear SVMs, one per label column, by mini-batch Pegasos with suffix averaging.

    ``features`` is (n, D), ``labels`` (n, d) in {0, 1}. A constant feature
    is appended so the bias lives in the last row of the returned
    (D + 1, d) matrix. Columns whose labels are all equal cannot be trained;
    they get a constant score of +-1 and are returned in ``degenerate``.
    """
    x = augment(features).astype(np.float32)
    y = np.asarray(labels, dtype=np.float32)
    if y.ndim != 2 or len(x) != len(y):
        raise ShapeMismatch(f"{len(x)} features vs labels of shape {y.shape}")
    if len(x) < 2:
        raise ShapeMismatch("need at least two training samples")
    n, dim = x.shape
    sign = 2 * y - 1
    pos = y.sum(0)
    degenerate = np.nonzero((pos == 0) | (pos == n))[0]
    live = np.setdiff1d(np.arange(y.shape[1]), degenerate)
    w = np.zeros((dim, y.shape[1]), dtype=np.float32)
    ws = w[:, live]
    s = sign[:, live]
    rng = np.random.default_rng(seed)
    radius = 1.0 / np.sqrt(reg)
    t = 0
    # average the iterates of the second half of training (suffix averaging)
    avg, n_avg = np.zeros_like(ws), 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            t += 1
            eta = 1.0 / (reg * t)
            xb, sb = x[idx], s[idx]
            viol = (sb * (xb @ ws)) < 1
            grad = xb.T @ (viol * sb)
            ws *= 1 - eta * reg
            ws += (eta / len(idx)) * grad
            norms = np.linalg.norm(ws, axis=0)
            ws *= np.minimum(1.0, radius / np.maximum(norms, 1e-12))
            if 2 * epoch >= epochs:
                avg += ws
                n_avg += 1
    w[:, live] = avg / max(n_avg, 1)
    w[-1, degenerate] = np.where(pos[degenerate] == n, 1.0, -1.0)
    if len(degenerate):
        log.info("%d of %d attributes degenerate (single-class labels)", len(degenerate), y.shape[1])
    return w.astype(np.float64), degenerate.tolist()


def _inv_sqrt(c):
    vals, vecs = linalg.eigh(c)
    if vals.min() <= 0:
        raise NumericalFailure("covariance not positive definite after regularization")
    return (vecs / np.sqrt(vals)) @ vecs.T


def fit_cca(x, y, n_dims, reg=1e-3):
    """Regularized CCA between row-paired views ``x`` (n, p) and ``y`` (n, q).

    Each covariance gets ``reg * trace / dim`` added to its diagonal.
    Returns ``(u_x, u_y, corr)`` with ``u_x.T @ Cxx_reg @ u_x = I`` and the
    canonical correlations in non-increasing order.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if len(y) != n:
        raise ShapeMismatch("views have different numbers of rows")
    if n < n_dims + 1:
        raise InsufficientPairs(f"{n} pairs for {n_dims} dimensions")
    if n_dims > min(x.shape[1], y.shape[1]):
        raise ShapeMismatch("n_dims exceeds a view's dimension")
    xc = x - x.mean(0)
    yc = y - y.mean(0)
    cxx = xc.T @ xc / (n - 1)
    cyy = yc.T @ yc / (n - 1)
    cxy = xc.T @ yc / (n - 1)
    tx = np.trace(cxx) / cxx.shape[0]
    ty = np.trace(cyy) / cyy.shape[0]
    cxx += reg * (tx if tx > 0 else 1.0) * np.eye(cxx.shape[0])
    cyy += reg * (ty if ty > 0 else 1.0) * np.eye(cyy.shape[0])
    try:
        ix, iy = _inv_sqrt(cxx), _inv_sqrt(cyy)
        u, s, vt = linalg.svd(ix @ cxy @ iy, full_matrices=False)
    except linalg.LinAlgError as e:
        raise NumericalFailure(str(e)) from e
    ux = ix @ u[:, :n_dims]
    uy = iy @ vt[:n_dims].T
    # sign: largest-magnitude entry of the stacked pair is positive (view-symmetric)
    stacked = np.vstack([ux, uy])
    signs = np.sign(stacked[np.abs(stacked).argmax(0), np.arange(n_dims)])
    signs[signs == 0] = 1
    return ux * signs, uy * signs, s[:n_dims]


@dataclass
class AttributeModel:
    W: np.ndarray           # (D + 1, d), bias in the last row
    U_img: np.ndarray       # (d, d')
    U_txt: np.ndarray       # (d, d')
    img_mean: np.ndarray    # (d,)
    txt_mean: np.ndarray    # (d,)
    kind: str
    correlations: np.ndarray = None
    degenerate: list = field(default_factory=list)

    @property
    def fv_dim(self):
        return self.W.shape[0] - 1

    @property
    def attr_dim(self):
        return self.W.shape[1]

    @property
    def dims(self):
        return self.U_img.shape[1]

    def attribute_scores(self, features):
        return augment(features) @ self.W

    def project_images(self, features, center=True):
        """Unnormalized subspace projections of feature rows.

        ``center=False`` keeps only the linear part (no bias, no centering),
        so projections scale with the features.
        """
        if center:
            return (self.attribute_scores(features) - self.img_mean) @ self.U_img
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        return x @ self.W[:-1] @ self.U_img

    def project_texts(self, bits, center=True):
        t = np.atleast_2d(np.asarray(bits, np.float64))
        return ((t - self.txt_mean) if center else t) @ self.U_txt


def l2_normalize(x):
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


def embed_image(fv, model, center=True):
    if fv.empty:
        return np.zeros(model.dims)
    if len(fv.values) != model.fv_dim:
        raise ShapeMismatch(f"Fisher vector has {len(fv.values)} dims, model expects {model.fv_dim}")
    return l2_normalize(model.project_images(fv.values, center)[0])


def embed_text(emb, model, center=True):
    if emb.kind != model.kind:
        raise KindMismatch(f"{emb.kind} embedding for a {model.kind} model")
    if len(emb.bits) != model.attr_dim:
        raise ShapeMismatch(f"embedding has {len(emb.bits)} dims, model expects {model.attr_dim}")
    return l2_normalize(model.project_texts(emb.bits, center)[0])


def fit_attribute_model(features, labels, kind, n_dims, svm_reg=1e-4, cca_reg=1e-3,
                        epochs=20, seed=0):
    """Train the attribute SVMs and calibrate them against the labels with CCA."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    W, degenerate = train_attribute_svms(features, labels, svm_reg, epochs, seed=seed)
    scores = augment(features) @ W
    # directions beyond the rank of the label view carry no text signal
    rank = int(np.linalg.matrix_rank(labels - labels.mean(0)))
    if rank < n_dims:
        log.info("%s model: subspace reduced from %d to %d dims (label rank)", kind, n_dims, rank)
        n_dims = max(1, rank)
    u_img, u_txt, corr = fit_cca(scores, labels, n_dims, cca_reg)
    log.info("%s model: top canonical correlations %s", kind,
             np.array2string(corr[:5], precision=3))
    return AttributeModel(W, u_img, u_txt, scores.mean(0), labels.mean(0), kind, corr, degenerate)
