"""SLIC superpixels: grid-seeded local k-means in joint Lab + (y, x) space.

A pixel joins the centre minimising
``D = sqrt(d_c**2 + (d_s / S)**2 * m**2)`` where ``d_c`` is the Lab distance,
``d_s`` the spatial distance, ``S = sqrt(N / k)`` the grid spacing and ``m``
the compactness. Small or disconnected fragments are merged afterwards so
every region is 4-connected.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from sklearn.base import BaseEstimator, TransformerMixin

from .imaging import rgb_to_lab, to_float

__all__ = [
    "SlicParams",
    "SuperpixelGrid",
    "SlicSuperpixels",
    "init_centers",
    "slic_distance",
    "slic_run",
    "slic_image",
    "enforce_connectivity",
    "boundary_map",
    "boundary_recall",
    "isoperimetric_quotients",
    "is_four_connected",
    "overlay",
]


@dataclass(frozen=True)
class SlicParams:
    k: int = 500
    m: float = 50.0
    max_iter: int = 10
    min_region_frac: float = 0.25

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.m <= 0:
            raise ValueError(f"m must be > 0, got {self.m}")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")
        if self.min_region_frac < 0:
            raise ValueError("min_region_frac must be >= 0")


@dataclass
class SuperpixelGrid:
    labels: np.ndarray
    num_regions: int

    @property
    def region_sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.num_regions)

    @property
    def shape(self):
        return self.labels.shape


def _grid_spacing(n_pixels: int, k: int) -> float:
    return math.sqrt(n_pixels / k)


def _lab_gradient(lab: np.ndarray) -> np.ndarray:
    p = np.pad(lab, ((1, 1), (1, 1), (0, 0)), mode="edge")
    dy = p[2:, 1:-1] - p[:-2, 1:-1]
    dx = p[1:-1, 2:] - p[1:-1, :-2]
    return (dy ** 2).sum(-1) + (dx ** 2).sum(-1)


def init_centers(lab, k: int) -> np.ndarray:
    """Seed centres on a regular grid and nudge them off edges.

    Returns a ``(K, 5)`` array of ``(L, a, b, y, x)``. Each seed moves to the
    lowest-gradient pixel of its 3x3 neighbourhood; ties keep the grid
    position. Seeds are not moved when the spacing is below 3 pixels, since
    neighbouring seeds would then be able to collide.
    """
    lab = np.asarray(lab, dtype=np.float64)
    h, w = lab.shape[:2]
    n = h * w
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of pixels {n}")
    s = _grid_spacing(n, k)
    nr = min(h, max(1, math.ceil(h / s - 1e-9)))
    nc = min(w, max(1, math.ceil(w / s - 1e-9)))
    # cell centres in pixel coordinates
    ys = (np.arange(nr) + 0.5) * h / nr - 0.5
    xs = (np.arange(nc) + 0.5) * w / nc - 0.5
    fy, fx = (a.ravel() for a in np.meshgrid(ys, xs, indexing="ij"))
    iy = np.clip(np.floor(fy + 0.5).astype(int), 0, h - 1)
    ix = np.clip(np.floor(fx + 0.5).astype(int), 0, w - 1)

    if s >= 3 and h >= 3 and w >= 3:
        grad = np.pad(_lab_gradient(lab), 1, mode="constant", constant_values=np.inf)
        # centre first so argmin keeps the grid position on ties
        offsets = [(0, 0)] + [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
                              if (dy, dx) != (0, 0)]
        cand = np.stack([grad[iy + 1 + dy, ix + 1 + dx] for dy, dx in offsets], axis=1)
        best = np.argmin(cand, axis=1)
        moved = best != 0
        off = np.array(offsets)[best]
        iy = iy + off[:, 0]
        ix = ix + off[:, 1]
        fy = np.where(moved, iy, fy)
        fx = np.where(moved, ix, fx)

    return np.column_stack([lab[iy, ix], fy, fx])


def slic_distance(pixel, center, m: float, s: float) -> float:
    """Distance between two ``(L, a, b, y, x)`` points."""
    if s <= 0:
        raise ValueError("grid spacing S must be positive")
    pixel = np.asarray(pixel, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    dc2 = float(((pixel[:3] - center[:3]) ** 2).sum())
    ds2 = float(((pixel[3:5] - center[3:5]) ** 2).sum())
    return math.sqrt(dc2 + ds2 / (s * s) * m * m)


def _assign(lab, centers, s, m):
    h, w = lab.shape[:2]
    labels = np.full((h, w), -1, dtype=np.int64)
    dist = np.full((h, w), np.inf)
    half = int(math.ceil(s))
    wm = (m / s) ** 2
    yy = np.arange(h, dtype=np.float64)
    xx = np.arange(w, dtype=np.float64)
    for idx, (l, a, b, cy, cx) in enumerate(centers):
        y0, y1 = max(0, int(cy) - half), min(h, int(cy) + half + 1)
        x0, x1 = max(0, int(cx) - half), min(w, int(cx) + half + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        patch = lab[y0:y1, x0:x1]
        dc2 = ((patch - (l, a, b)) ** 2).sum(-1)
        ds2 = (yy[y0:y1, None] - cy) ** 2 + (xx[None, x0:x1] - cx) ** 2
        d = dc2 + wm * ds2
        sub = dist[y0:y1, x0:x1]
        better = d < sub  # strict: ties stay with the lower centre index
        sub[better] = d[better]
        labels[y0:y1, x0:x1][better] = idx

    missing = labels < 0
    if missing.any():
        py, px = np.nonzero(missing)
        feat = np.column_stack([lab[py, px], py, px])
        diff = feat[:, None, :] - centers[None, :, :]
        d = (diff[..., :3] ** 2).sum(-1) + wm * (diff[..., 3:] ** 2).sum(-1)
        labels[py, px] = np.argmin(d, axis=1)
    return labels


def _update(lab, labels, centers):
    h, w = labels.shape
    k = len(centers)
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=k).astype(np.float64)
    yy, xx = np.mgrid[0:h, 0:w]
    feats = [lab[..., 0], lab[..., 1], lab[..., 2], yy, xx]
    sums = np.stack([np.bincount(flat, weights=f.ravel().astype(np.float64), minlength=k)
                     for f in feats], axis=1)
    new = centers.copy()
    alive = counts > 0
    new[alive] = sums[alive] / counts[alive, None]
    return new


def _components(labels: np.ndarray):
    h, w = labels.shape
    idx = np.arange(h * w).reshape(h, w)
    right = labels[:, :-1] == labels[:, 1:]
    down = labels[:-1, :] == labels[1:, :]
    src = np.concatenate([idx[:, :-1][right], idx[:-1, :][down]])
    dst = np.concatenate([idx[:, 1:][right], idx[1:, :][down]])
    graph = coo_matrix((np.ones(src.size, dtype=np.int8), (src, dst)), shape=(h * w, h * w))
    n, comp = connected_components(graph, directed=False)
    return n, comp.reshape(h, w)


def _relabel_raster(labels: np.ndarray) -> np.ndarray:
    """Renumber labels 0..R-1 in order of first raster appearance."""
    flat = labels.ravel()
    uniq, first = np.unique(flat, return_index=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(uniq))
    return rank[np.searchsorted(uniq, flat)].reshape(labels.shape)


def enforce_connectivity(labels, min_size: float) -> SuperpixelGrid:
    """Split labels into 4-connected components and absorb small ones.

    Components smaller than ``min_size`` pixels are merged, smallest first,
    into the largest adjacent component.
    """
    labels = np.asarray(labels)
    n, comp = _components(labels)
    sizes = np.bincount(comp.ravel(), minlength=n).astype(np.int64)

    a = np.concatenate([comp[:, :-1].ravel(), comp[:-1, :].ravel()])
    b = np.concatenate([comp[:, 1:].ravel(), comp[1:, :].ravel()])
    differ = a != b
    pairs = np.unique(np.stack([np.minimum(a[differ], b[differ]),
                                np.maximum(a[differ], b[differ])], axis=1), axis=0)
    neighbours = [set() for _ in range(n)]
    for p, q in pairs:
        neighbours[p].add(int(q))
        neighbours[q].add(int(p))

    parent = list(range(n))
    group_size = sizes.tolist()

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for c in np.lexsort((np.arange(n), sizes)):
        c = int(c)
        if parent[c] != c or group_size[c] >= min_size:
            continue
        cand = {find(q) for q in neighbours[c]} - {c}
        if not cand:
            continue
        target = min(cand, key=lambda r: (-group_size[r], r))
        parent[c] = target
        group_size[target] += group_size[c]
        neighbours[target] |= neighbours[c]
        neighbours[c] = set()

    roots = np.array([find(i) for i in range(n)])
    merged = roots[comp]
    out = _relabel_raster(merged)
    return SuperpixelGrid(out, int(out.max()) + 1)


def slic_run(lab, params: SlicParams) -> SuperpixelGrid:
    """Superpixels of a Lab image; deterministic for given inputs."""
    lab = np.asarray(lab, dtype=np.float64)
    h, w = lab.shape[:2]
    n = h * w
    centers = init_centers(lab, params.k)
    s = _grid_spacing(n, params.k)
    labels = _assign(lab, centers, s, params.m)
    for _ in range(params.max_iter):
        new = _update(lab, labels, centers)
        shift = np.sqrt(((new[:, 3:] - centers[:, 3:]) ** 2).sum(1)).max()
        centers = new
        labels = _assign(lab, centers, s, params.m)
        if shift < 0.1 * s:
            break
    return enforce_connectivity(labels, params.min_region_frac * n / params.k)


def slic_image(image, params: SlicParams) -> SuperpixelGrid:
    """Convenience: SLIC on an RGB image in ``[0, 1]`` (or uint8)."""
    return slic_run(rgb_to_lab(image), params)


# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------

def boundary_map(labels) -> np.ndarray:
    """Pixels with a 4-neighbour carrying a different label."""
    labels = np.asarray(labels)
    edge = np.zeros(labels.shape, dtype=bool)
    dh = labels[:, :-1] != labels[:, 1:]
    dv = labels[:-1, :] != labels[1:, :]
    edge[:, :-1] |= dh
    edge[:, 1:] |= dh
    edge[:-1, :] |= dv
    edge[1:, :] |= dv
    return edge


def boundary_recall(labels, gt_labels, tolerance: int = 0) -> float:
    """Fraction of ground-truth boundary pixels within ``tolerance`` (Chebyshev)
    of a superpixel boundary. 1.0 when the ground truth has no boundary."""
    gt = boundary_map(gt_labels)
    sp = boundary_map(labels)
    if tolerance > 0:
        from scipy.ndimage import binary_dilation
        sp = binary_dilation(sp, structure=np.ones((2 * tolerance + 1,) * 2, dtype=bool))
    total = gt.sum()
    return 1.0 if total == 0 else float((gt & sp).sum() / total)


def isoperimetric_quotients(labels) -> np.ndarray:
    """``4*pi*area / perimeter**2`` per region, perimeter in pixel edges
    (image border edges included)."""
    labels = np.asarray(labels)
    r = int(labels.max()) + 1
    area = np.bincount(labels.ravel(), minlength=r).astype(np.float64)
    padded = np.pad(labels, 1, constant_values=-1)
    perim = np.zeros(r)
    for a, b in ((padded[1:-1, 1:-1], padded[1:-1, :-2]), (padded[1:-1, 1:-1], padded[1:-1, 2:]),
                 (padded[1:-1, 1:-1], padded[:-2, 1:-1]), (padded[1:-1, 1:-1], padded[2:, 1:-1])):
        diff = a != b
        perim += np.bincount(a[diff], minlength=r)
    return 4.0 * np.pi * area / np.maximum(perim, 1.0) ** 2


def is_four_connected(labels) -> bool:
    labels = np.asarray(labels)
    n, _ = _components(labels)
    return n == len(np.unique(labels))


def overlay(image, grid, color=(1.0, 0.0, 0.0)) -> np.ndarray:
    """Draw region boundaries over an RGB image."""
    rgb = to_float(image).copy()
    labels = grid.labels if isinstance(grid, SuperpixelGrid) else np.asarray(grid)
    if labels.shape != rgb.shape[:2]:
        raise ValueError(f"grid {labels.shape} and image {rgb.shape[:2]} dims differ")
    rgb[boundary_map(labels)] = color
    return rgb


class SlicSuperpixels(TransformerMixin, BaseEstimator):
    """Transformer mapping RGB images to superpixel label maps.

    Parameters
    ----------
    n_segments : int
        Target number of superpixels ``k``.
    compactness : float
        ``m``; larger values give more regular regions.
    max_iter : int
    min_region_frac : float
        Fragments below this fraction of ``N / k`` pixels are merged.
    """

    def __init__(self, n_segments=500, compactness=50.0, max_iter=10, min_region_frac=0.25):
        self.n_segments = n_segments
        self.compactness = compactness
        self.max_iter = max_iter
        self.min_region_frac = min_region_frac

    def _params(self) -> SlicParams:
        return SlicParams(int(self.n_segments), float(self.compactness),
                          int(self.max_iter), float(self.min_region_frac))

    def fit(self, X, y=None):
        self._params()
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        """``X``: one ``(H, W, 3)`` image or a stack ``(n, H, W, 3)``."""
        arr = to_float(X)
        params = self._params()
        if arr.ndim == 3:
            return slic_image(arr, params).labels
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ValueError(f"expected (H, W, 3) or (n, H, W, 3) images, got {arr.shape}")
        return np.stack([slic_image(im, params).labels for im in arr])
