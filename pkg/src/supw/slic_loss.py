"""Superpixel-guided consistency loss and binary cross-entropy.

A superpixel is consistent when one class dominates it. With ``p_j`` the mean
foreground probability of region ``j``, its occupancy is
``o_j = max(p_j, 1 - p_j)``. Regions with ``o_j < tau`` are inconsistent.

* hard form: fraction of inconsistent regions (a metric, zero gradient);
* soft form: ``mean_j relu(tau - o_j) / tau``, differentiable almost everywhere.

The combined loss is ``lambda1 * CE + lambda2 * SG``.
"""
from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field

import numpy as np

from .numerics import GradPair, as_tensor
from .slic import SlicParams, SuperpixelGrid, slic_image

__all__ = [
    "SlicLossConfig",
    "LossPair",
    "GridCache",
    "occupancy",
    "l_sg",
    "bce",
    "l_slic",
]


@dataclass(frozen=True)
class LossPair(GradPair):
    """A scalar :class:`GradPair` that also carries its named terms."""

    terms: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SlicLossConfig:
    lambda1: float = 0.25
    lambda2: float = 0.75
    tau: float = 0.9
    mode: str = "soft"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda1 == 0 and self.lambda2 == 0:
            raise ValueError("lambda1 and lambda2 cannot both be zero")
        if not 0.5 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0.5, 1], got {self.tau}")
        if self.mode not in ("hard", "soft"):
            raise ValueError(f"mode must be 'hard' or 'soft', got {self.mode!r}")

    @classmethod
    def from_weight(cls, weight: float, tau: float = 0.9, mode: str = "soft",
                    convex: bool = True) -> "SlicLossConfig":
        """Map a single superpixel weight ``w`` onto the two coefficients.

        ``convex=True`` gives ``lambda2 = w, lambda1 = 1 - w``; otherwise
        ``lambda1`` stays at 1.
        """
        if not 0.0 <= weight <= 1.0 and convex:
            raise ValueError("convex weight must lie in [0, 1]")
        lam1 = 1.0 - weight if convex else 1.0
        return cls(lam1, weight, tau, mode)


def _region_index(grid) -> tuple[np.ndarray, int]:
    if isinstance(grid, SuperpixelGrid):
        return grid.labels, grid.num_regions
    labels = np.asarray(grid)
    return labels, int(labels.max()) + 1


def _region_means(probs, labels, n_regions):
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=n_regions).astype(np.float64)
    if (counts == 0).any():
        raise ValueError("superpixel grid has an empty region")
    sums = np.bincount(flat, weights=probs.ravel(), minlength=n_regions)
    return sums / counts, counts


def occupancy(probs, grid) -> np.ndarray:
    """Per-region dominance ``max(mean p, 1 - mean p)``, in ``[0.5, 1]``."""
    probs = as_tensor(probs)
    labels, r = _region_index(grid)
    if probs.shape != labels.shape:
        raise ValueError(f"probs {probs.shape} and grid {labels.shape} dims differ")
    mean, _ = _region_means(probs, labels, r)
    return np.maximum(mean, 1.0 - mean)


def l_sg(probs, grid, tau: float = 0.9, mode: str = "soft") -> GradPair:
    """Superpixel consistency loss; ``backward`` returns ``(dprobs,)``."""
    if not 0.5 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0.5, 1], got {tau}")
    probs = as_tensor(probs)
    labels, r = _region_index(grid)
    if probs.shape != labels.shape:
        raise ValueError(f"probs {probs.shape} and grid {labels.shape} dims differ")
    mean, counts = _region_means(probs, labels, r)
    occ = np.maximum(mean, 1.0 - mean)

    if mode == "hard":
        value = float(np.mean(occ < tau))
        return GradPair(np.float64(value), lambda g: (np.zeros_like(probs),))
    if mode != "soft":
        raise ValueError(f"mode must be 'hard' or 'soft', got {mode!r}")

    gap = tau - occ
    value = float(np.maximum(gap, 0.0).sum() / (r * tau))

    def backward(g):
        active = gap > 0
        # d occ / d mean is +1 above one half, -1 below
        d_mean = np.where(active, -np.sign(mean - 0.5) / (r * tau), 0.0) / counts
        return (float(g) * d_mean[labels],)

    return GradPair(np.float64(value), backward)


def bce(y, y_prob, clamp_eps: float = 1e-7) -> GradPair:
    """Mean binary cross-entropy; ``backward`` returns ``(dprob,)``."""
    y = as_tensor(y)
    p = as_tensor(y_prob)
    if y.shape != p.shape:
        raise ValueError(f"bce: target {y.shape} and prediction {p.shape} dims differ")
    pc = np.clip(p, clamp_eps, 1.0 - clamp_eps)
    n = p.size
    value = -np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    inside = (p >= clamp_eps) & (p <= 1.0 - clamp_eps)

    def backward(g):
        grad = (-y / pc + (1.0 - y) / (1.0 - pc)) / n
        return (float(g) * np.where(inside, grad, 0.0),)

    return GradPair(np.float64(value), backward)


class GridCache:
    """Superpixel grids keyed by image content and SLIC parameters.

    Lookups are lock-free; inserts are serialised.
    """

    def __init__(self, max_items: int | None = None):
        self._grids: dict = {}
        self._lock = threading.Lock()
        self.max_items = max_items

    @staticmethod
    def key(image, params: SlicParams):
        arr = np.ascontiguousarray(np.asarray(image, dtype=np.float64))
        digest = hashlib.sha1(arr.tobytes()).hexdigest()
        return digest, arr.shape, params

    def get(self, image, params: SlicParams) -> SuperpixelGrid:
        key = self.key(image, params)
        grid = self._grids.get(key)
        if grid is None:
            grid = slic_image(image, params)
            with self._lock:
                if self.max_items is not None and len(self._grids) >= self.max_items:
                    self._grids.pop(next(iter(self._grids)))
                self._grids.setdefault(key, grid)
        return grid

    def __len__(self):
        return len(self._grids)


def l_slic(x, y, y_prob, cfg: SlicLossConfig, slic_params: SlicParams | None = None,
           grid=None, cache: GridCache | None = None) -> LossPair:
    """``lambda1 * bce(y, y_prob) + lambda2 * l_sg(y_prob, grid(x))``.

    The grid is computed from ``x`` unless given; ``cache`` memoises it.
    """
    p = as_tensor(y_prob)
    if grid is None:
        if slic_params is None:
            raise ValueError("need slic_params or a precomputed grid")
        grid = cache.get(x, slic_params) if cache is not None else slic_image(x, slic_params)
    ce = bce(y, p)
    sg = l_sg(p, grid, cfg.tau, cfg.mode)
    value = cfg.lambda1 * float(ce.value) + cfg.lambda2 * float(sg.value)

    def backward(g):
        g = float(g)
        return (cfg.lambda1 * ce.backward(g)[0] + cfg.lambda2 * sg.backward(g)[0],)

    return LossPair(np.float64(value), backward,
                    {"ce": float(ce.value), "sg": float(sg.value)})
