"""Two-domain synthetic lesion images with exact masks.

Each sample is one to three filled ellipses ("lesions") over a textured,
vignetted background. The two built-in domains share the lesion geometry
distribution (geometry is drawn from its own seeded stream, so equal seeds
give equal masks in both domains) and differ only photometrically: the
source domain is warm red/pink with soft lesion borders, the target is
green/cyan with sharp, higher-contrast borders.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict, replace
from typing import Tuple

import numpy as np
from scipy import ndimage

from .imaging import hsv_to_rgb, load_image, load_mask, save_image, save_mask, to_float

Pair = Tuple[float, float]


@dataclass(frozen=True)
class DomainSpec:
    name: str
    background_hue: Pair
    lesion_hue: Pair
    background_sat: Pair = (0.5, 0.7)
    background_val: Pair = (0.5, 0.65)
    lesion_sat: Pair = (0.4, 0.6)
    lesion_val: Pair = (0.8, 0.95)
    texture: float = 0.08
    vignette: float = 0.3
    edge_softness: float = 1.0
    lesion_count: Tuple[int, int] = (1, 3)
    eccentricity: Pair = (0.0, 0.8)

    def __post_init__(self):
        for r in (self.background_hue, self.lesion_hue):
            if not (0.0 <= r[0] <= r[1] < 1.0):
                raise ValueError(f"hue range {r} must lie within [0, 1)")
        lo, hi = self.lesion_count
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid lesion count range {self.lesion_count}")
        if not 0.0 <= self.eccentricity[0] <= self.eccentricity[1] < 1.0:
            raise ValueError(f"invalid eccentricity range {self.eccentricity}")


SOURCE = DomainSpec(
    name="source",
    background_hue=(0.0, 0.05),
    lesion_hue=(0.90, 0.96),
    background_sat=(0.5, 0.7),
    background_val=(0.55, 0.7),
    lesion_sat=(0.35, 0.55),
    lesion_val=(0.8, 0.95),
    edge_softness=1.5,
)

TARGET = DomainSpec(
    name="target",
    background_hue=(0.45, 0.52),
    lesion_hue=(0.30, 0.38),
    background_sat=(0.55, 0.8),
    background_val=(0.45, 0.6),
    lesion_sat=(0.5, 0.7),
    lesion_val=(0.8, 0.95),
    edge_softness=0.0,
)

PRESETS = {"source": SOURCE, "target": TARGET}


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    a: float  # semi-major axis
    b: float  # semi-minor axis
    angle: float
    hue: float

    @property
    def area(self) -> float:
        return float(np.pi * self.a * self.b)

    @property
    def perimeter(self) -> float:
        # Ramanujan's approximation
        a, b = self.a, self.b
        return float(np.pi * (3 * (a + b) - np.sqrt((3 * a + b) * (a + 3 * b))))

    def inside(self, yy, xx) -> np.ndarray:
        dy, dx = yy - self.cy, xx - self.cx
        c, s = np.cos(self.angle), np.sin(self.angle)
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0


def sample_seed(seed: int, index: int) -> int:
    """Per-sample seed derived by hashing ``(seed, index)``."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def sample_ellipses(spec: DomainSpec, size: int, seed) -> list:
    """Lesion geometry; colour-independent so both domains share it."""
    geo = np.random.default_rng([int(seed), 0])
    col = np.random.default_rng([int(seed), 1])
    n = int(geo.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    out = []
    for _ in range(n):
        a = geo.uniform(0.10, 0.22) * size
        ecc = geo.uniform(*spec.eccentricity)
        b = a * np.sqrt(1.0 - ecc ** 2)
        angle = geo.uniform(0.0, np.pi)
        margin = a + 1.0
        cy = geo.uniform(margin, size - 1 - margin)
        cx = geo.uniform(margin, size - 1 - margin)
        out.append(Ellipse(cy, cx, a, b, angle, float(col.uniform(*spec.lesion_hue))))
    return out


def _smooth_noise(rng, size, sigma):
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return field / (field.std() + 1e-12)


def gen_sample(spec: DomainSpec, size: int, seed):
    """Render one ``(image, mask)`` pair; ``size`` must be divisible by 8."""
    if size % 8:
        raise ValueError(f"size must be divisible by 8, got {size}")
    ellipses = sample_ellipses(spec, size, seed)
    rng = np.random.default_rng([int(seed), 2])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    hsv = np.empty((size, size, 3))
    hsv[..., 0] = rng.uniform(*spec.background_hue)
    hsv[..., 1] = rng.uniform(*spec.background_sat)
    hsv[..., 2] = rng.uniform(*spec.background_val)
    bg_texture = spec.texture * (0.7 * _smooth_noise(rng, size, size / 16)
                                 + 0.3 * _smooth_noise(rng, size, 1.0))
    hsv[..., 2] += bg_texture

    mask = np.zeros((size, size), dtype=bool)
    lesion_hsv = hsv.copy()
    for e in ellipses:
        inside = e.inside(yy, xx)
        mask |= inside
        lesion_hsv[inside, 0] = e.hue
        lesion_hsv[inside, 1] = rng.uniform(*spec.lesion_sat)
        lesion_hsv[inside, 2] = rng.uniform(*spec.lesion_val)
    lesion_hsv[..., 2] += 0.3 * spec.texture * _smooth_noise(rng, size, size / 32)

    alpha = mask.astype(np.float64)
    if spec.edge_softness > 0:
        alpha = ndimage.gaussian_filter(alpha, spec.edge_softness)
    rgb_bg = hsv_to_rgb(np.clip(hsv, 0.0, 1.0))
    rgb_le = hsv_to_rgb(np.clip(lesion_hsv, 0.0, 1.0))
    rgb = alpha[..., None] * rgb_le + (1.0 - alpha[..., None]) * rgb_bg

    r2 = ((yy - size / 2) ** 2 + (xx - size / 2) ** 2) / (size / 2) ** 2
    rgb *= (1.0 - spec.vignette * np.clip(r2, 0.0, 2.0) / 2.0)[..., None]
    return np.clip(rgb, 0.0, 1.0), mask


def split_counts(n: int) -> tuple:
    n_val = int(round(0.1 * n))
    n_test = int(round(0.1 * n))
    return n - n_val - n_test, n_val, n_test


def gen_dataset(spec: DomainSpec, n: int, out_dir, seed: int, size: int = 128) -> dict:
    """Write ``images/``, ``masks/`` and ``manifest.json`` under ``out_dir``.

    Split assignment is 80/10/10 by a seeded shuffle.
    """
    if n < 10:
        raise ValueError(f"need n >= 10 samples, got {n}")
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)

    n_train, n_val, _ = split_counts(n)
    order = np.random.default_rng([int(seed), 99]).permutation(n)
    split = np.empty(n, dtype=object)
    split[order[:n_train]] = "train"
    split[order[n_train:n_train + n_val]] = "val"
    split[order[n_train + n_val:]] = "test"

    entries = []
    for i in range(n):
        s = sample_seed(seed, i)
        img, mask = gen_sample(spec, size, s)
        name = f"{spec.name}_{i:05d}.png"
        save_image(img, os.path.join(img_dir, name))
        save_mask(mask, os.path.join(mask_dir, name))
        entries.append({"file": name, "split": str(split[i]), "domain": spec.name, "seed": s})
    manifest = {"domain": spec.name, "seed": int(seed), "size": int(size),
                "spec": asdict(spec), "files": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_dataset(root, split=None):
    """Read ``(names, images, masks)`` from a dataset directory.

    With a manifest, ``split`` selects ``train``/``val``/``test``; without
    one, every image under ``images/`` is returned.
    """
    if not os.path.isdir(root):
        raise FileNotFoundError(f"dataset directory not found: {root}")
    manifest_path = os.path.join(root, "manifest.json")
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            files = json.load(fh)["files"]
        names = [f["file"] for f in files if split is None or f["split"] == split]
    else:
        img_dir = os.path.join(root, "images")
        if not os.path.isdir(img_dir):
            raise FileNotFoundError(f"no images/ directory under {root}")
        names = sorted(os.listdir(img_dir))
    images = [to_float(load_image(os.path.join(root, "images", n))) for n in names]
    masks = [load_mask(os.path.join(root, "masks", n)) for n in names]
    return names, images, masks


def with_lesions(spec: DomainSpec, count: int) -> DomainSpec:
    return replace(spec, lesion_count=(count, count))
