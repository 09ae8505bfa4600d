"""Instance-selective whitening of feature covariances.

Standardized feature maps of an image and of its photometrically transformed
copy give two covariance matrices. Entries that move a lot between the two
carry style (appearance) and are pushed toward zero; the rest are left alone.

Pipeline per hooked layer::

    cov = covariance(instance_norm(F))        # (C, C)
    V   = pair_variance(cov(x), cov(T x))      # per-entry variance
    M   = kmeans_split(V)                      # 1 on high-variance entries
    L   = isw_loss(cov, M)                     # mean |cov| over masked entries
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .numerics import GradPair, as_tensor, instance_norm

__all__ = [
    "StyleMask",
    "IswState",
    "covariance",
    "dwt_loss",
    "pair_variance",
    "two_means_1d",
    "kmeans_split",
    "isw_loss",
    "isw_update",
    "SelectiveWhitening",
    "suppress_style",
]


def covariance(f_std) -> GradPair:
    """``F F^T / (h w)`` for standardized features ``[C, H, W]`` or ``[N, C, H, W]``.

    ``backward(G)`` returns the gradient with respect to the features.
    """
    f = as_tensor(f_std)
    if f.ndim not in (3, 4):
        raise ValueError(f"covariance expects [C,H,W] or [N,C,H,W], got {f.shape}")
    hw = f.shape[-1] * f.shape[-2]
    flat = f.reshape(f.shape[:-2] + (hw,))
    cov = flat @ np.swapaxes(flat, -1, -2) / hw
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))

    def backward(g):
        g = as_tensor(g)
        gs = g + np.swapaxes(g, -1, -2)
        return ((gs @ flat / hw).reshape(f.shape),)

    return GradPair(cov, backward)


def dwt_loss(cov) -> GradPair:
    """Mean absolute deviation of a covariance from the identity."""
    cov = as_tensor(cov)
    if cov.shape[-1] != cov.shape[-2]:
        raise ValueError(f"dwt_loss needs square matrices, got {cov.shape}")
    diff = cov - np.eye(cov.shape[-1])
    value = np.abs(diff).mean()
    return GradPair(np.float64(value), lambda g: (float(g) * np.sign(diff) / diff.size,))


def pair_variance(cov_orig, cov_aug) -> np.ndarray:
    """Per-entry variance of each (original, transformed) covariance pair,
    averaged over instances when a leading batch axis is present."""
    a = as_tensor(cov_orig)
    b = as_tensor(cov_aug)
    if a.shape != b.shape:
        raise ValueError(f"covariance shapes differ: {a.shape} vs {b.shape}")
    mu = 0.5 * (a + b)
    v = 0.5 * ((a - mu) ** 2 + (b - mu) ** 2)
    return v.mean(axis=0) if v.ndim == 3 else v


@dataclass
class StyleMask:
    mask: np.ndarray
    n_high: int
    n_low: int
    threshold: float = float("inf")

    @property
    def empty(self) -> bool:
        return self.n_high == 0


def _sse(x):
    return float(((x - x.mean()) ** 2).sum()) if x.size else 0.0


def two_means_1d(values, iters: int = 100, restarts: int = 5, seed=0):
    """Two-cluster k-means on scalars.

    Lloyd iterations run from ``restarts`` random seedings plus one seeding
    at the best sorted split, which is the global optimum in one dimension;
    the lowest within-cluster SSE wins. Returns a boolean array marking the
    cluster with the larger centroid (all False when fewer than two distinct
    values exist).
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    high = np.zeros(x.size, dtype=bool)
    if np.unique(x).size < 2:
        return high

    order = np.argsort(x, kind="stable")
    xs = x[order]
    csum = np.cumsum(xs)
    csq = np.cumsum(xs ** 2)
    n = xs.size
    i = np.arange(1, n)
    left = csq[:-1] - csum[:-1] ** 2 / i
    right = (csq[-1] - csq[:-1]) - (csum[-1] - csum[:-1]) ** 2 / (n - i)
    cost = left + right
    cost[xs[1:] == xs[:-1]] = np.inf  # never split equal values
    cut = int(np.argmin(cost))
    starts = [(xs[:cut + 1].mean(), xs[cut + 1:].mean())]

    rng = np.random.default_rng(seed)
    uniq = np.unique(x)
    for _ in range(restarts):
        lo, hi = np.sort(rng.choice(uniq, size=2, replace=False))
        starts.append((lo, hi))

    best, best_cost = None, np.inf
    for lo, hi in starts:
        for _ in range(iters):
            assign = np.abs(x - hi) < np.abs(x - lo)
            if assign.all() or not assign.any():
                break
            new_lo, new_hi = x[~assign].mean(), x[assign].mean()
            if new_lo == lo and new_hi == hi:
                break
            lo, hi = new_lo, new_hi
        assign = np.abs(x - hi) < np.abs(x - lo)
        if assign.all() or not assign.any():
            continue
        c = _sse(x[assign]) + _sse(x[~assign])
        if c < best_cost - 1e-15:
            best, best_cost = assign, c
    return high if best is None else best


def kmeans_split(v, iters: int = 100, restarts: int = 5, seed=0) -> StyleMask:
    """Split the strictly-upper-triangular entries of ``V`` into a high- and a
    low-variance group and return the symmetric mask of the high group."""
    v = as_tensor(v)
    c = v.shape[0]
    if v.ndim != 2 or v.shape[1] != c or c < 2:
        raise ValueError(f"kmeans_split needs a square matrix with C >= 2, got {v.shape}")
    iu = np.triu_indices(c, k=1)
    high = two_means_1d(v[iu], iters, restarts, seed)
    mask = np.zeros((c, c), dtype=bool)
    mask[iu[0][high], iu[1][high]] = True
    mask |= mask.T
    thr = float(v[iu][high].min()) if high.any() else float("inf")
    return StyleMask(mask, int(high.sum()), int((~high).sum()), thr)


def isw_loss(cov, mask, reduction: str = "masked") -> GradPair:
    """Mean ``|cov|`` over masked entries.

    ``reduction="masked"`` divides by the number of masked entries,
    ``"all"`` by ``C*C``. A batch axis on ``cov`` is averaged over.
    """
    cov = as_tensor(cov)
    m = mask.mask if isinstance(mask, StyleMask) else np.asarray(mask, dtype=bool)
    if cov.shape[-2:] != m.shape:
        raise ValueError(f"covariance {cov.shape} and mask {m.shape} dims differ")
    batch = cov.shape[0] if cov.ndim == 3 else 1
    if reduction == "masked":
        denom = int(m.sum())
    elif reduction == "all":
        denom = m.size
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    if denom == 0 or not m.any():
        return GradPair(np.float64(0.0), lambda g: (np.zeros_like(cov),))
    mf = m.astype(np.float64)
    value = float((np.abs(cov) * mf).sum() / (denom * batch))

    def backward(g):
        return (float(g) * np.sign(cov) * mf / (denom * batch),)

    return GradPair(np.float64(value), backward)


@dataclass
class IswState:
    """Warm-up bookkeeping for the hooked layers.

    ``V`` is averaged over the first ``warmup_epochs`` epochs; the masks are
    then frozen (or, with ``recluster``, recomputed at every later epoch
    from the still-growing average).
    """

    layers: tuple
    warmup_epochs: int = 5
    recluster: bool = False
    seed: int = 0
    v_sum: dict = field(default_factory=dict)
    v_count: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)
    mask_epoch: int = -1

    def __post_init__(self):
        self.layers = tuple(self.layers)
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")

    def running_v(self, layer_id) -> np.ndarray:
        self._check(layer_id)
        if not self.v_count.get(layer_id):
            raise ValueError(f"no variance collected for layer {layer_id!r}")
        return self.v_sum[layer_id] / self.v_count[layer_id]

    def active(self, epoch: int) -> bool:
        return epoch >= self.warmup_epochs and len(self.masks) == len(self.layers)

    def collecting(self, epoch: int) -> bool:
        return epoch < self.warmup_epochs or self.recluster

    def mask(self, layer_id) -> StyleMask:
        self._check(layer_id)
        return self.masks[layer_id]

    def _check(self, layer_id):
        if layer_id not in self.layers:
            raise KeyError(f"unknown layer id {layer_id!r}")

    def freeze(self, epoch: int) -> None:
        for lid in self.layers:
            self.masks[lid] = kmeans_split(self.running_v(lid), seed=self.seed)
        self.mask_epoch = epoch

    def begin_epoch(self, epoch: int) -> None:
        """Form masks when the warm-up ends (and per epoch when reclustering)."""
        if epoch < self.warmup_epochs:
            return
        if not self.masks or (self.recluster and self.mask_epoch != epoch):
            if all(self.v_count.get(lid) for lid in self.layers):
                self.freeze(epoch)


def isw_update(state: IswState, layer_id, v, epoch: int) -> IswState:
    """Fold one variance map into the warm-up statistics.

    During warm-up the map is accumulated; at the first epoch >= warm-up the
    masks are formed from the accumulated average; afterwards the masks stay
    fixed (unless ``state.recluster``).
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    state._check(layer_id)
    state.begin_epoch(epoch)
    if state.collecting(epoch):
        v = as_tensor(v)
        if layer_id in state.v_sum:
            state.v_sum[layer_id] = state.v_sum[layer_id] + v
        else:
            state.v_sum[layer_id] = v.copy()
        state.v_count[layer_id] = state.v_count.get(layer_id, 0) + 1
    return state


class SelectiveWhitening(TransformerMixin, BaseEstimator):
    """Estimator wrapper: learn a style mask from feature pairs.

    ``fit(F, F_aug)`` takes raw feature maps ``[N, C, H, W]`` of images and of
    their photometric transforms; ``transform`` returns the masked
    covariances ``cov * M`` per instance and ``loss`` the whitening loss.
    """

    def __init__(self, eps=1e-8, reduction="masked", iters=100, restarts=5, random_state=0):
        self.eps = eps
        self.reduction = reduction
        self.iters = iters
        self.restarts = restarts
        self.random_state = random_state

    def _cov(self, features):
        f = as_tensor(features)
        if f.ndim == 3:
            f = f[None]
        if f.ndim != 4:
            raise ValueError(f"expected [N, C, H, W] features, got {f.shape}")
        return covariance(instance_norm(f, self.eps).value).value

    def fit(self, X, X_aug):
        cov_a, cov_b = self._cov(X), self._cov(X_aug)
        self.variance_ = pair_variance(cov_a, cov_b)
        self.mask_ = kmeans_split(self.variance_, self.iters, self.restarts, self.random_state)
        self.n_features_in_ = self.variance_.shape[0]
        return self

    def transform(self, X):
        check_is_fitted(self, "mask_")
        return self._cov(X) * self.mask_.mask

    def loss(self, X) -> float:
        check_is_fitted(self, "mask_")
        return float(isw_loss(self._cov(X), self.mask_, self.reduction).value)


def suppress_style(features, mask, steps: int = 500, lr: float = 0.05, decay: float = 0.98,
                   tol: float = 1e-3, eps: float = 1e-8):
    """Gradient descent on the whitening loss alone over free features.

    ``features`` is ``[C, H, W]``; they are re-standardized at every step, so
    only the correlation structure can change. Stops once every masked
    ``|cov|`` entry is below ``tol``. Returns ``(features, cov, n_steps)``.

    The gradient is rescaled by ``H*W`` times the mask size so that ``lr`` is
    a step in correlation units whatever the feature shape, and the step
    decays geometrically because the loss is an L1 penalty.
    """
    f = as_tensor(features).copy()
    if f.ndim != 3:
        raise ValueError(f"expected [C, H, W] features, got {f.shape}")
    m = mask.mask if isinstance(mask, StyleMask) else np.asarray(mask, dtype=bool)
    if not m.any():
        return f, covariance(instance_norm(f[None], eps).value[0]).value, 0
    scale = f.shape[1] * f.shape[2] * int(m.sum())
    for step in range(steps + 1):
        f = instance_norm(f[None], eps).value[0]
        norm = instance_norm(f[None], eps)
        cov = covariance(norm.value[0])
        if np.abs(cov.value[m]).max() < tol or step == steps:
            return f, cov.value, step
        loss = isw_loss(cov.value, m)
        g = norm.backward(cov.backward(loss.backward(1.0)[0])[0][None])[0][0]
        f = f - lr * decay ** step * scale * g
