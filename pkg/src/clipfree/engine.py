"""Reference CPU tensor operations.

Every tensor is a numpy array of shape ``(height, width, channels)`` in
row-major order (HWC).  There is exactly one layout; nothing here is NCHW.

Depth-to-space follows the TensorFlow/TFLite index mapping::

    out[h * b + i, w * b + j, c] = in[h, w, (i * b + j) * C_out + c]

so a ``1x1x9`` tensor ``[0..8]`` with ``b = 3`` becomes the ``3x3x1`` tensor
``[[0, 1, 2], [3, 4, 5], [6, 7, 8]]``.

All functions are pure: inputs are never modified and the same inputs give
bitwise-identical outputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import StructuralError

__all__ = [
    "ConvWeights",
    "as_tensor",
    "conv2d",
    "relu",
    "clipped_relu",
    "depth_to_space",
    "space_to_depth",
    "add",
    "nearest_upsample_replicate",
    "box_blur3",
    "reflect_index",
]


def as_tensor(t, *, name: str = "tensor") -> np.ndarray:
    """Validate ``t`` as an HWC tensor; float inputs keep their dtype."""
    arr = np.asarray(t)
    if arr.ndim != 3:
        raise StructuralError(f"{name}: expected rank-3 (h, w, c) array, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise StructuralError(f"{name}: empty dimension in shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


@dataclass(frozen=True)
class ConvWeights:
    """Convolution parameters.

    ``weights`` has shape ``(kernel_h, kernel_w, in_channels // groups,
    out_channels)``; ``groups > 1`` gives a grouped convolution where output
    group ``g`` only sees input group ``g``.
    """

    weights: np.ndarray
    bias: np.ndarray
    groups: int = 1

    def __post_init__(self):
        w = np.asarray(self.weights)
        b = np.asarray(self.bias)
        if w.ndim != 4:
            raise StructuralError(f"conv weights must be rank 4 (kh, kw, in, out), got {w.shape}")
        if b.shape != (w.shape[3],):
            raise StructuralError(f"bias shape {b.shape} does not match out_channels {w.shape[3]}")
        if self.groups < 1 or w.shape[3] % self.groups:
            raise StructuralError(f"out_channels {w.shape[3]} not divisible by groups {self.groups}")

    @property
    def kernel_h(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel_w(self) -> int:
        return self.weights.shape[1]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weights.shape[3]


def _pad(x: np.ndarray, ph: int, pw: int, padding: str) -> np.ndarray:
    if padding == "zero":
        return np.pad(x, ((ph, ph), (pw, pw), (0, 0)), mode="constant")
    if padding == "reflect":
        rows = [reflect_index(i, x.shape[0]) for i in range(-ph, x.shape[0] + ph)]
        cols = [reflect_index(j, x.shape[1]) for j in range(-pw, x.shape[1] + pw)]
        return x[np.ix_(rows, cols)]
    raise StructuralError(f"unknown padding mode {padding!r} (expected 'zero' or 'reflect')")


def reflect_index(i: int, n: int) -> int:
    """Mirror index ``i`` into ``[0, n)`` without repeating the edge sample.

    ``-1 -> 1``, ``n -> n - 2`` (the ``d c b | a b c d | c b a`` convention).
    A length-1 axis maps everything to 0.
    """
    if n == 1:
        return 0
    period = 2 * n - 2
    i %= period
    return period - i if i >= n else i


def conv2d(x, w: ConvWeights, padding: str = "zero") -> np.ndarray:
    """SAME-size 2-D convolution (cross-correlation) with bias.

    Accumulates in float64 and narrows back to the input's float dtype.
    """
    x = as_tensor(x, name="conv2d input")
    if w.kernel_h % 2 == 0 or w.kernel_w % 2 == 0:
        raise StructuralError(f"conv2d needs odd kernel dimensions, got {w.kernel_h}x{w.kernel_w}")
    if x.shape[2] != w.in_channels:
        raise StructuralError(
            f"conv2d channel mismatch: input has {x.shape[2]}, weights expect {w.in_channels}"
        )
    h, wd, _ = x.shape
    xp = _pad(x.astype(np.float64), w.kernel_h // 2, w.kernel_w // 2, padding)
    # (h, w, c, kh, kw)
    win = sliding_window_view(xp, (w.kernel_h, w.kernel_w), axis=(0, 1))
    wt = np.asarray(w.weights, dtype=np.float64)
    cin_g = wt.shape[2]
    cout_g = w.out_channels // w.groups
    out = np.empty((h, wd, w.out_channels), dtype=np.float64)
    for g in range(w.groups):
        cols = win[:, :, g * cin_g:(g + 1) * cin_g].reshape(h * wd, -1)
        # window layout is (c, kh, kw); match it on the weight side
        wg = wt[:, :, :, g * cout_g:(g + 1) * cout_g].transpose(2, 0, 1, 3).reshape(-1, cout_g)
        out[:, :, g * cout_g:(g + 1) * cout_g] = (cols @ wg).reshape(h, wd, cout_g)
    out += np.asarray(w.bias, dtype=np.float64)
    return out.astype(x.dtype)


def relu(t) -> np.ndarray:
    t = as_tensor(t)
    return np.maximum(t, 0).astype(t.dtype)


def clipped_relu(t, lo: float = 0.0, hi: float = 255.0) -> np.ndarray:
    if not lo < hi:
        raise StructuralError(f"clipped_relu needs lo < hi, got lo={lo}, hi={hi}")
    t = as_tensor(t)
    return np.clip(t, lo, hi).astype(t.dtype)


def depth_to_space(t, block: int) -> np.ndarray:
    t = as_tensor(t)
    if block < 1:
        raise StructuralError(f"block must be positive, got {block}")
    h, w, c = t.shape
    if c % (block * block):
        raise StructuralError(f"depth_to_space: {c} channels not divisible by block^2={block * block}")
    co = c // (block * block)
    out = t.reshape(h, w, block, block, co).transpose(0, 2, 1, 3, 4)
    return out.reshape(h * block, w * block, co).copy()


def space_to_depth(t, block: int) -> np.ndarray:
    """Inverse of :func:`depth_to_space`."""
    t = as_tensor(t)
    hb, wb, co = t.shape
    if hb % block or wb % block:
        raise StructuralError(f"space_to_depth: spatial size {hb}x{wb} not divisible by {block}")
    h, w = hb // block, wb // block
    out = t.reshape(h, block, w, block, co).transpose(0, 2, 1, 3, 4)
    return out.reshape(h, w, block * block * co).copy()


def add(a, b) -> np.ndarray:
    a = as_tensor(a, name="add lhs")
    b = as_tensor(b, name="add rhs")
    if a.shape != b.shape:
        raise StructuralError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return (a + b).astype(np.result_type(a.dtype, b.dtype))


def nearest_upsample_replicate(t, factor: int) -> np.ndarray:
    """Anchor tensor for a depth-to-space head.

    Repeats the channel vector ``factor**2`` times so that
    ``depth_to_space(nearest_upsample_replicate(x, f), f)`` is the
    nearest-neighbour upscale of ``x``.
    """
    t = as_tensor(t)
    if factor < 1:
        raise StructuralError(f"factor must be positive, got {factor}")
    return np.tile(t, (1, 1, factor * factor))


def box_blur3(t) -> np.ndarray:
    """3x3 homogeneous (1/9) mean filter per channel with reflect borders."""
    t = as_tensor(t)
    xp = _pad(t.astype(np.float64), 1, 1, "reflect")
    h, w, _ = t.shape
    acc = np.zeros(t.shape, dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            acc += xp[di:di + h, dj:dj + w]
    return (acc / 9.0).astype(t.dtype)
