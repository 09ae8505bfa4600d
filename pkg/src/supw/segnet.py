"""Toy encoder-decoder for binary segmentation with manual backprop.

Encoder: three blocks of ``conv3x3 stride 2 -> instance norm -> relu``.
The instance-normalized activations of each block are the whitening hooks.
Decoder: x8 bilinear upsample and a 1x1 conv, then sigmoid. The 1x1 conv is
applied before the upsample; both are linear and the interpolation weights
sum to one, so the result is the same and 64x cheaper.

Checkpoint layout (little-endian)::

    b"SUPW" | u32 version | u32 meta_len | meta JSON
    | u32 n_params | n_params * (u16 name_len | name | u8 ndim | u32 dims | f32 values)
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .imaging import PhotometricParams, photometric_transform
from .numerics import conv2d, instance_norm, relu, sigmoid, upsample_bilinear

MAGIC = b"SUPW"
VERSION = 1
HOOKS = ("block1", "block2", "block3")


class CheckpointError(ValueError):
    pass


@dataclass
class ForwardResult:
    probs: np.ndarray            # (N, H, W)
    features: list               # standardized block outputs, or [] without capture
    backward: Callable = field(repr=False, default=None)


class SegNetwork:
    """Parameters live in ``self.params`` (name -> float64 array)."""

    def __init__(self, params: dict, widths=(8, 16, 32), in_channels: int = 3, eps: float = 1e-5):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.widths = tuple(int(w) for w in widths)
        self.in_channels = in_channels
        self.eps = eps
        self._check_shapes()

    def _check_shapes(self):
        cin = self.in_channels
        expected = {}
        for i, w in enumerate(self.widths, 1):
            expected[f"conv{i}.w"] = (w, cin, 3, 3)
            expected[f"conv{i}.b"] = (w,)
            cin = w
        expected["head.w"] = (1, cin, 1, 1)
        expected["head.b"] = (1,)
        if set(expected) != set(self.params):
            raise CheckpointError(
                f"parameter names {sorted(self.params)} do not match {sorted(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise CheckpointError(
                    f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "SegNetwork":
        return SegNetwork({k: v.copy() for k, v in self.params.items()},
                          self.widths, self.in_channels, self.eps)

    def rounded_to_float32(self) -> "SegNetwork":
        """The network as it will be after a checkpoint round trip."""
        return SegNetwork({k: v.astype(np.float32).astype(np.float64)
                           for k, v in self.params.items()},
                          self.widths, self.in_channels, self.eps)

    def forward(self, x, capture: bool = False) -> ForwardResult:
        return forward(self, x, capture)


def build(widths=(8, 16, 32), seed=0, in_channels: int = 3, eps: float = 1e-5) -> SegNetwork:
    """He-initialised network, deterministic in ``seed``; biases start at 0."""
    widths = tuple(int(w) for w in widths)
    if len(widths) != 3:
        raise ValueError(f"need three encoder widths, got {widths}")
    rng = np.random.default_rng(seed)
    params = {}
    cin = in_channels
    for i, w in enumerate(widths, 1):
        fan_in = cin * 9
        params[f"conv{i}.w"] = rng.standard_normal((w, cin, 3, 3)) * np.sqrt(2.0 / fan_in)
        params[f"conv{i}.b"] = np.zeros(w)
        cin = w
    params["head.w"] = rng.standard_normal((1, cin, 1, 1)) * np.sqrt(1.0 / cin)
    params["head.b"] = np.zeros(1)
    return SegNetwork(params, widths, in_channels, eps)


def forward(net: SegNetwork, x, capture: bool = False) -> ForwardResult:
    """Run the network on ``x[N, 3, H, W]`` (H, W divisible by 8).

    ``result.backward(d_probs, d_features=None)`` returns a dict of parameter
    gradients. ``d_features`` is an optional list of gradients for the three
    captured feature maps.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != net.in_channels:
        raise ValueError(f"expected input [N, {net.in_channels}, H, W], got {x.shape}")
    n, _, h, w = x.shape
    if h % 8 or w % 8:
        raise ValueError(f"input dims {h}x{w} must be divisible by 8")

    p = net.params
    tape = []
    feats = []
    act = x
    for i in range(1, 4):
        conv = conv2d(act, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=2, pad=1)
        norm = instance_norm(conv.value, net.eps)
        rl = relu(norm.value)
        tape.append((conv, norm, rl))
        feats.append(norm.value)
        act = rl.value
    head = conv2d(act, p["head.w"], p["head.b"])
    up = upsample_bilinear(head.value, h, w)
    out = sigmoid(up.value)
    probs = out.value[:, 0]

    def backward(d_probs, d_features=None):
        grads = {}
        g = out.backward(np.asarray(d_probs, dtype=np.float64)[:, None])[0]
        g = up.backward(g)[0]
        g, grads["head.w"], grads["head.b"] = head.backward(g)
        for i in range(3, 0, -1):
            conv, norm, rl = tape[i - 1]
            g = rl.backward(g)[0]
            if d_features is not None and d_features[i - 1] is not None:
                g = g + d_features[i - 1]
            g = norm.backward(g)[0]
            g, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = conv.backward(g)
        return grads

    return ForwardResult(probs, feats if capture else [], backward)


def to_nchw(images) -> np.ndarray:
    """``(H, W, 3)`` image or list of them to ``[N, 3, H, W]``."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


def transform_batch(x, params: PhotometricParams, seed) -> np.ndarray:
    """Photometric transform of each instance of ``x[N, 3, H, W]``."""
    seeds = np.random.SeedSequence(seed).spawn(x.shape[0])
    out = [photometric_transform(img.transpose(1, 2, 0), params, s) for img, s in zip(x, seeds)]
    return np.ascontiguousarray(np.stack(out).transpose(0, 3, 1, 2))


def forward_pair(net: SegNetwork, x, params: PhotometricParams, seed):
    """Forward ``x`` and its photometric transform with the same parameters.

    Returns ``(result_x, result_tx, tx)``; both results carry captured features.
    """
    x = np.asarray(x, dtype=np.float64)
    tx = transform_batch(x, params, seed)
    return forward(net, x, capture=True), forward(net, tx, capture=True), tx


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_checkpoint(net: SegNetwork, path, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta.update(widths=list(net.widths), in_channels=net.in_channels, eps=net.eps)
    meta_bytes = json.dumps(meta, sort_keys=True, default=str).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(net.params))]
    for name in sorted(net.params):
        arr = net.params[name]
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, with_meta: bool = False):
    """Read a checkpoint; the network is only built once the whole file parsed."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a SUPW checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata: {exc}") from exc
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B")
        if ndim > 8:
            raise CheckpointError(f"corrupt shape table for {name}")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(r.take(4 * size), dtype="<f4")
        params[name] = values.astype(np.float64).reshape(shape)
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after parameter table")
    try:
        net = SegNetwork(params, meta.get("widths", (8, 16, 32)),
                         meta.get("in_channels", 3), meta.get("eps", 1e-5))
    except CheckpointError as exc:
        raise CheckpointError(f"corrupt shape table: {exc}") from exc
    return (net, meta) if with_meta else net
