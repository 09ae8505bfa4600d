"""Image I/O, colour conversions, resizing and augmentations.

Working images are ``float64`` arrays of shape ``(H, W, 3)`` in ``[0, 1]``;
8-bit ``uint8`` arrays are the on-disk form. Masks are boolean ``(H, W)``
arrays (0 = background, 255 = lesion on disk).
"""
from __future__ import annotations

import os
from dataclasses import dataclass, asdict
from typing import Sequence, Tuple, Union

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .numerics import upsample_bilinear

Range = Union[float, Tuple[float, float]]

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# I/O
# --------------------------------------------------------------------------

def _check_png_header(path) -> None:
    with open(path, "rb") as fh:
        head = fh.read(33)
    if not head.startswith(PNG_SIGNATURE):
        return
    if len(head) < 33 or head[12:16] != b"IHDR":
        raise ImageFormatError(f"{path}: truncated PNG header")
    bit_depth = head[24]
    if bit_depth != 8:
        raise ImageFormatError(f"{path}: unsupported bit depth {bit_depth}")


def _open(path) -> PILImage.Image:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    _check_png_header(path)
    try:
        img = PILImage.open(path)
        img.load()
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: cannot decode image ({exc})") from exc
    if img.format not in ("PNG", "PPM"):
        raise ImageFormatError(f"{path}: unsupported format {img.format}")
    return img


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG or binary PPM (P6) into a ``uint8 (H, W, 3)`` array."""
    img = _open(path)
    if img.mode in ("I", "I;16", "I;16B", "F"):
        raise ImageFormatError(f"{path}: unsupported bit depth (mode {img.mode})")
    if img.mode != "RGB":
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.uint8).copy()


def save_image(image, path) -> None:
    """Write an RGB image as PNG (or PPM when the suffix is ``.ppm``).

    Float input is interpreted as ``[0, 1]`` and rounded to 8 bits.
    """
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {arr.shape}")
    fmt = "PPM" if str(path).lower().endswith(".ppm") else "PNG"
    PILImage.fromarray(arr, "RGB").save(path, format=fmt)


def load_mask(path) -> np.ndarray:
    img = _open(path)
    if img.mode in ("I", "I;16", "I;16B", "F"):
        raise ImageFormatError(f"{path}: unsupported bit depth (mode {img.mode})")
    arr = np.asarray(img.convert("L"))
    return arr > 127


def save_mask(mask, path) -> None:
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    PILImage.fromarray(arr, "L").save(path, format="PNG")


def save_labels16(labels, path) -> None:
    """Write an integer label map as a 16-bit grayscale PNG."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 65535:
        raise ValueError("labels must fit in uint16")
    PILImage.fromarray(labels.astype(np.uint16)).save(path, format="PNG")


def load_labels16(path) -> np.ndarray:
    with PILImage.open(path) as img:
        return np.asarray(img).astype(np.int64)


def to_float(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def to_uint8(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# colour spaces
# --------------------------------------------------------------------------

_SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ_TO_SRGB = np.linalg.inv(_SRGB_TO_XYZ)
D65_WHITE = np.array([0.95047, 1.0, 1.08883])
_DELTA = 6.0 / 29.0


def srgb_to_linear(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.0031308, 12.92 * c,
                    1.055 * np.power(np.maximum(c, 0.0031308), 1 / 2.4) - 0.055)


def rgb_to_lab(image) -> np.ndarray:
    """sRGB in ``[0, 1]`` to CIELAB (D65, 2 degree observer)."""
    rgb = to_float(image)
    xyz = srgb_to_linear(rgb) @ _SRGB_TO_XYZ.T / D65_WHITE
    f = np.where(xyz > _DELTA ** 3, np.cbrt(xyz), xyz / (3 * _DELTA ** 2) + 4.0 / 29.0)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def lab_to_rgb(lab) -> np.ndarray:
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    f = np.stack([fy + lab[..., 1] / 500.0, fy, fy - lab[..., 2] / 200.0], axis=-1)
    xyz = np.where(f > _DELTA, f ** 3, 3 * _DELTA ** 2 * (f - 4.0 / 29.0)) * D65_WHITE
    return np.clip(linear_to_srgb(xyz @ _XYZ_TO_SRGB.T), 0.0, 1.0)


def rgb_to_hsv(image) -> np.ndarray:
    rgb = to_float(image)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)
    safe = np.where(c > 0, c, 1.0)
    h = np.where(v == r, ((g - b) / safe) % 6.0,
                 np.where(v == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(c > 0, h / 6.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0] % 1.0, hsv[..., 1], hsv[..., 2]
    k = np.stack([(5 + h * 6) % 6, (3 + h * 6) % 6, (1 + h * 6) % 6], axis=-1)
    return v[..., None] - (v * s)[..., None] * np.clip(np.minimum(k, 4 - k), 0, 1)


def grayscale(image) -> np.ndarray:
    rgb = to_float(image)
    return rgb @ np.array([0.299, 0.587, 0.114])


# --------------------------------------------------------------------------
# resizing
# --------------------------------------------------------------------------

def resize_image(image, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres, output clamped to ``[0, 1]``."""
    rgb = to_float(image)
    if rgb.shape[:2] == (height, width):
        return rgb.copy()
    chw = rgb.transpose(2, 0, 1)
    out = upsample_bilinear(chw, height, width).value.transpose(1, 2, 0)
    return np.clip(out, 0.0, 1.0)


def resize_mask(mask, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize keeping the mask binary."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    rows = np.minimum(((np.arange(height) + 0.5) * h / height).astype(int), h - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * w / width).astype(int), w - 1)
    return mask[rows[:, None], cols[None, :]]


# --------------------------------------------------------------------------
# photometric transform
# --------------------------------------------------------------------------

def _as_range(r: Range, name: str) -> Tuple[float, float]:
    if np.isscalar(r):
        if r < 0:
            raise ValueError(f"{name} range must be non-negative, got {r}")
        return -float(r), float(r)
    lo, hi = (float(v) for v in r)
    if lo > hi:
        raise ValueError(f"{name} range ({lo}, {hi}) is empty")
    return lo, hi


@dataclass
class PhotometricParams:
    """Jitter ranges for the geometry-preserving transform.

    A scalar ``d`` means a uniform draw from ``[-d, d]``; a pair ``(lo, hi)``
    gives the bounds explicitly, so ``(0.1, 0.1)`` fixes the value.
    """

    brightness: Range = 0.2
    contrast: Range = 0.2
    saturation: Range = 0.2
    hue: Range = 0.05
    blur_sigma: Tuple[float, float] = (0.0, 1.5)

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation"):
            _as_range(getattr(self, name), name)
        lo, hi = _as_range(self.hue, "hue")
        if max(abs(lo), abs(hi)) > 0.5:
            raise ValueError("hue delta must be <= 0.5")
        s_lo, s_hi = self.blur_sigma
        if s_lo < 0 or s_hi < s_lo:
            raise ValueError(f"invalid blur sigma range {self.blur_sigma}")

    @classmethod
    def identity(cls) -> "PhotometricParams":
        return cls(0.0, 0.0, 0.0, 0.0, (0.0, 0.0))

    def to_dict(self) -> dict:
        return asdict(self)


def _draw(rng: np.random.Generator, r: Range, name: str) -> float:
    lo, hi = _as_range(r, name)
    # always consume one draw so the stream does not depend on which ranges are zero
    u = rng.random()
    return lo + (hi - lo) * u


def photometric_transform(image, params: PhotometricParams, seed) -> np.ndarray:
    """Colour jitter plus Gaussian blur; no spatial warp.

    Deterministic for a given ``seed``; output clamped to ``[0, 1]``.
    """
    rgb = to_float(image).copy()
    rng = np.random.default_rng(seed)
    db = _draw(rng, params.brightness, "brightness")
    dc = _draw(rng, params.contrast, "contrast")
    ds = _draw(rng, params.saturation, "saturation")
    dh = _draw(rng, params.hue, "hue")
    s_lo, s_hi = params.blur_sigma
    sigma = s_lo + (s_hi - s_lo) * rng.random()

    if db != 0.0:
        rgb = np.clip(rgb + db, 0.0, 1.0)
    if dc != 0.0:
        mean = grayscale(rgb).mean()
        rgb = np.clip((rgb - mean) * (1.0 + dc) + mean, 0.0, 1.0)
    if ds != 0.0:
        gray = grayscale(rgb)[..., None]
        rgb = np.clip(gray + (rgb - gray) * (1.0 + ds), 0.0, 1.0)
    if dh != 0.0:
        hsv = rgb_to_hsv(rgb)
        hsv[..., 0] = (hsv[..., 0] + dh) % 1.0
        rgb = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    if sigma > 0.0:
        rgb = ndimage.gaussian_filter(rgb, sigma=(sigma, sigma, 0), mode="nearest")
        rgb = np.clip(rgb, 0.0, 1.0)
    return rgb


# --------------------------------------------------------------------------
# geometric augmentation
# --------------------------------------------------------------------------

@dataclass
class GeometricConfig:
    """Per-transform probabilities and magnitudes.

    Probabilities default to 5% for every transform except rotation (20%).
    """

    p_flip: float = 0.05
    p_rotate: float = 0.20
    p_shift: float = 0.05
    p_shear: float = 0.05
    p_zoom: float = 0.05
    max_rotation_deg: float = 20.0
    max_shift_frac: float = 0.1
    max_shear: float = 0.1
    max_zoom: float = 0.1

    @classmethod
    def disabled(cls) -> "GeometricConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)

    def to_dict(self) -> dict:
        return asdict(self)


def geometric_augment(image, mask, config: GeometricConfig, seed):
    """Apply one random spatial transform to an image and its mask.

    The image is resampled bilinearly, the mask by nearest neighbour so it
    stays binary. Returns copies even when nothing is applied.
    """
    rgb = to_float(image)
    mask = np.asarray(mask, dtype=bool)
    if rgb.shape[:2] != mask.shape:
        raise ValueError(f"image {rgb.shape[:2]} and mask {mask.shape} dims differ")
    rng = np.random.default_rng(seed)
    h, w = mask.shape
    u = rng.random(5)
    mags = rng.uniform(-1.0, 1.0, size=6)

    flip = u[0] < config.p_flip
    # matrix maps output (row, col) offsets from centre to input offsets
    mat = np.eye(2)
    offset = np.zeros(2)
    warped = False
    if u[1] < config.p_rotate:
        a = np.deg2rad(config.max_rotation_deg * mags[0])
        mat = mat @ np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        warped = True
    if u[2] < config.p_shift:
        offset += np.array([mags[1] * config.max_shift_frac * h,
                            mags[2] * config.max_shift_frac * w])
        warped = True
    if u[3] < config.p_shear:
        mat = mat @ np.array([[1.0, 0.0], [config.max_shear * mags[3], 1.0]])
        warped = True
    if u[4] < config.p_zoom:
        z = 1.0 + config.max_zoom * mags[4]
        mat = mat @ np.diag([1.0 / z, 1.0 / z])
        warped = True

    out_img = rgb.copy()
    out_mask = mask.copy()
    if flip:
        out_img = out_img[:, ::-1].copy()
        out_mask = out_mask[:, ::-1].copy()
    if warped:
        centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        off = centre - mat @ centre + offset
        out_img = np.stack([
            ndimage.affine_transform(out_img[..., c], mat, offset=off, order=1, mode="nearest")
            for c in range(3)], axis=-1)
        out_img = np.clip(out_img, 0.0, 1.0)
        out_mask = ndimage.affine_transform(out_mask.astype(np.uint8), mat, offset=off,
                                            order=0, mode="nearest").astype(bool)
    return out_img, out_mask


def validate_image(image, name: str = "image") -> np.ndarray:
    """Return a float ``(H, W, 3)`` copy or raise a descriptive error."""
    rgb = to_float(image)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or min(rgb.shape[:2]) < 1:
        raise ValueError(f"{name}: expected (H, W, 3) array, got shape {rgb.shape}")
    if not np.isfinite(rgb).all():
        raise ValueError(f"{name}: contains non-finite values")
    return rgb


def stack_images(images: Sequence) -> np.ndarray:
    return np.stack([validate_image(im) for im in images])
