"""Differentiable primitives with explicit forward/backward.

Tensors are plain ``numpy.ndarray`` objects in float64. Every operation returns
a :class:`GradPair`: the forward value plus a closure mapping the gradient of
some scalar with respect to that value onto gradients for each input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "GradPair",
    "NonFiniteError",
    "GradcheckReport",
    "as_tensor",
    "conv2d",
    "instance_norm",
    "relu",
    "sigmoid",
    "add",
    "mul",
    "scale",
    "elementwise",
    "upsample_bilinear",
    "bilinear_matrix",
    "numerical_gradient",
    "gradcheck",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces or receives NaN/Inf."""


@dataclass(frozen=True)
class GradPair:
    """Forward value and its backward map.

    ``backward(grad_out)`` returns a tuple with one gradient per differentiable
    input, each shaped like that input.
    """

    value: np.ndarray
    backward: Callable[[np.ndarray], tuple]


def as_tensor(x, dtype=np.float64) -> np.ndarray:
    return np.asarray(x, dtype=dtype)


def _finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def conv2d(x, kernel, bias=None, stride: int = 1, pad: int = 0) -> GradPair:
    """2-D cross-correlation of ``x[N,Cin,H,W]`` with ``kernel[Cout,Cin,kh,kw]``.

    The backward returns ``(dx, dkernel)`` or ``(dx, dkernel, dbias)`` when a
    bias is given.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(
            f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(
            f"conv2d: input shape {x.shape} incompatible with kernel shape {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got {stride}, {pad}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw:
        raise ValueError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    kmat = kernel.reshape(cout, cin * kh * kw)
    out = cols @ kmat.T
    if bias is not None:
        out += bias
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = _finite(np.ascontiguousarray(out), "conv2d output")

    def backward(g):
        g = as_tensor(g)
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        dkernel = (gmat.T @ cols).reshape(kernel.shape)
        dcols = (gmat @ kmat).reshape(n, ho, wo, cin, kh, kw)
        dxp = np.zeros((n, cin, hp, wp))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
        dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        if bias is None:
            return dx, dkernel
        return dx, dkernel, gmat.sum(axis=0)

    return GradPair(out, backward)


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------

def instance_norm(x, eps: float = 1e-8) -> GradPair:
    """Per-sample, per-channel standardization over the spatial axes.

    Uses the population variance with ``eps`` inside the square root, so a
    constant channel maps to zeros.
    """
    x = _finite(as_tensor(x), "instance_norm input")
    if x.ndim < 3:
        raise ValueError(f"instance_norm expects [..., H, W] with channels, got {x.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    axes = (-2, -1)
    mean = x.mean(axis=axes, keepdims=True)
    centered = x - mean
    var = (centered ** 2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g):
        g = as_tensor(g)
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return GradPair(xhat, backward)


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def relu(x) -> GradPair:
    x = as_tensor(x)
    on = x > 0
    return GradPair(np.where(on, x, 0.0), lambda g: (np.where(on, g, 0.0),))


def sigmoid(x) -> GradPair:
    x = as_tensor(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return GradPair(s, lambda g: (as_tensor(g) * s * (1.0 - s),))


def add(a, b) -> GradPair:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return GradPair(_finite(a + b, "add"), lambda g: (as_tensor(g), as_tensor(g)))


def mul(a, b) -> GradPair:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return GradPair(_finite(a * b, "mul"), lambda g: (as_tensor(g) * b, as_tensor(g) * a))


def scale(x, c: float) -> GradPair:
    x = as_tensor(x)
    return GradPair(_finite(x * c, "scale"), lambda g: (as_tensor(g) * c,))


_ELEMENTWISE = {"relu": relu, "sigmoid": sigmoid, "add": add, "mul": mul, "scale": scale}


def elementwise(op: str, *args) -> GradPair:
    """Dispatch to one of ``relu``, ``sigmoid``, ``add``, ``mul``, ``scale``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# --------------------------------------------------------------------------
# resizing
# --------------------------------------------------------------------------

def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix ``[n_out, n_in]`` with half-pixel centers."""
    if n_in < 1 or n_out < 1:
        raise ValueError("sizes must be >= 1")
    mat = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def upsample_bilinear(x, out_h: int, out_w: int) -> GradPair:
    """Bilinear resize of the last two axes (align_corners=False)."""
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return GradPair(x.copy(), lambda g: (as_tensor(g).copy(),))
    rh = bilinear_matrix(h, out_h)
    rw = bilinear_matrix(w, out_w)
    out = rh @ x @ rw.T

    def backward(g):
        return (rh.T @ as_tensor(g) @ rw,)

    return GradPair(out, backward)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_error: float
    rel_tol: float
    abs_floor: float = 1e-9
    worst_index: tuple = field(default=())

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.rel_tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"gradcheck {status}: max rel err {self.max_rel_error:.3e} "
                f"(tol {self.rel_tol:g}) at {self.worst_index}")


def numerical_gradient(func: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = as_tensor(x).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(func(x))
        flat[i] = orig - h
        fm = float(func(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f is not finite around coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float = 1e-9):
    """Elementwise relative error; differences below ``abs_floor`` count as zero."""
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), abs_floor)
    return np.where(diff <= abs_floor, 0.0, diff / denom)


def gradcheck(f: Callable[[np.ndarray], GradPair], x, h: float = 1e-5,
              rel_tol: float = 1e-3, abs_floor: float = 1e-9) -> GradcheckReport:
    """Compare ``f(x).backward(1.0)[0]`` with central differences.

    ``f`` must return a :class:`GradPair` whose value is a scalar.
    """
    x = as_tensor(x)
    pair = f(x)
    if np.size(pair.value) != 1:
        raise ValueError("gradcheck needs a scalar-valued function")
    analytic = as_tensor(pair.backward(np.float64(1.0))[0]).reshape(x.shape)
    numeric = numerical_gradient(lambda z: float(f(z).value), x, h)
    err = relative_error(analytic, numeric, abs_floor)
    worst = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
    return GradcheckReport(analytic, numeric, float(err.max(initial=0.0)),
                           rel_tol, abs_floor, tuple(int(i) for i in worst))
