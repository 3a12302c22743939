"""Differentiable neural-network primitives on top of :mod:`jointsal.autodiff`.

Spatial ops use the ``[B, C, H, W]`` layout and zero padding throughout.
Convolutions are computed by windowed tensor contraction; their input
gradients are scattered back one kernel offset at a time, which keeps the
reduction order fixed and the results reproducible.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .autodiff import Tensor, as_tensor
from .errors import ConfigError, DimensionError


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what} expects [B, C, H, W], got shape {x.shape}")


def _pad(a: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(a: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of shape [B, C, Ho, Wo, kh, kw] over an already padded input."""
    win = sliding_window_view(a, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with kernel ``[out_ch, in_ch, kh, kw]``."""
    _check_4d(x, "conv2d")
    out_ch, in_ch, kh, kw = weight.shape
    B, C, H, W = x.shape
    if C != in_ch:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {weight.shape}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise DimensionError(f"conv2d kernel {weight.shape} larger than padded input {x.shape}")
    xp = _pad(x.data, padding)
    win = _windows(xp, kh, kw, stride)
    Ho, Wo = win.shape[2], win.shape[3]
    w = weight.data
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            # [B, Ho, Wo, C, kh, kw]
            cols = np.tensordot(g, w, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += cols[..., i, j]
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        if weight.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return Tensor.from_op(out, parents, backward)


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed convolution (the adjoint of :func:`conv2d`).

    ``weight`` is ``[in_ch, out_ch, kh, kw]``. The output side length is
    ``(H - 1) * stride - 2 * padding + kh``.
    """
    _check_4d(x, "conv_transpose2d")
    in_ch, out_ch, kh, kw = weight.shape
    B, C, H, W = x.shape
    if C != in_ch:
        raise DimensionError(f"conv_transpose2d channel mismatch: input {x.shape} vs kernel {weight.shape}")
    Hf, Wf = (H - 1) * stride + kh, (W - 1) * stride + kw
    Ho, Wo = Hf - 2 * padding, Wf - 2 * padding
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv_transpose2d padding {padding} leaves no output for {x.shape}")
    w = weight.data
    full = np.zeros((B, out_ch, Hf, Wf), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(x.data, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            full[:, :, i : i + stride * H : stride, j : j + stride * W : stride] += contrib
    out = full[:, :, padding : padding + Ho, padding : padding + Wo]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gfull = _pad(g, padding)
        win = _windows(gfull, kh, kw, stride)  # [B, out_ch, H, W, kh, kw]
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return Tensor.from_op(out, parents, backward)


def _pool_windows(x: Tensor, window, stride) -> tuple[np.ndarray, int, int, int, int]:
    _check_4d(x, "pool")
    kh, kw = (window, window) if isinstance(window, int) else tuple(window)
    stride = stride if stride is not None else (kh, kw)
    sh, sw = (stride, stride) if isinstance(stride, int) else tuple(stride)
    if kh > x.shape[2] or kw > x.shape[3]:
        raise DimensionError(f"pool window {(kh, kw)} larger than input {x.shape}")
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    return win, kh, kw, sh, sw


def max_pool2d(x: Tensor, window, stride=None) -> Tensor:
    """Max over windows; ties send the gradient to the first maximum in row-major order."""
    win, kh, kw, sh, sw = _pool_windows(x, window, stride)
    B, C, Ho, Wo = win.shape[:4]
    flat = win.reshape(B, C, Ho, Wo, kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        b, c, oh, ow = np.indices(arg.shape)
        rows = oh * sh + arg // kw
        cols = ow * sw + arg % kw
        np.add.at(gx, (b, c, rows, cols), g)
        return (gx,)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), backward)


def avg_pool2d(x: Tensor, window, stride=None) -> Tensor:
    win, kh, kw, sh, sw = _pool_windows(x, window, stride)
    out = win.mean(axis=(-2, -1))
    shape = x.shape
    Ho, Wo = out.shape[2], out.shape[3]

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        share = g / (kh * kw)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] += share
        return (gx,)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), backward)


def global_max_pool(x: Tensor) -> Tensor:
    return max_pool2d(x, (x.shape[2], x.shape[3]))


def global_avg_pool(x: Tensor) -> Tensor:
    return avg_pool2d(x, (x.shape[2], x.shape[3]))


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance, then apply gain and shift."""
    D = x.shape[-1]
    if gain.shape != (D,) or shift.shape != (D,):
        raise DimensionError(f"layer_norm parameters {gain.shape}/{shift.shape} do not match last dim {D}")
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + shift.data

    def backward(g):
        gx = gg = gs = None
        reduce_axes = tuple(range(a.ndim - 1))
        if gain.requires_grad:
            gg = (g * xhat).sum(axis=reduce_axes)
        if shift.requires_grad:
            gs = g.sum(axis=reduce_axes)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gs

    return Tensor.from_op(out, (x, gain, shift), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    a = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(a))
    y = np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor.from_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error linear unit, ``x * Phi(x)``."""
    a = x.data
    cdf = 0.5 * (1.0 + erf(a / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * a * a) / math.sqrt(2.0 * math.pi)
    return Tensor.from_op(a * cdf, (x,), lambda g: (g * (cdf + a * pdf),))


def dropout2d(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Zero whole channels with probability ``rate`` and rescale the rest.

    Identity when not training or when ``rate`` is 0.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout2d in training mode needs an explicit generator")
    keep = rng.random(x.shape[:2]) >= rate
    mask = keep.astype(x.dtype) / (1.0 - rate)
    mask = mask.reshape(x.shape[:2] + (1,) * (x.ndim - 2))
    return x * Tensor(mask)


def upsample_nearest(x: Tensor, scale: int) -> Tensor:
    """Replicate every pixel into a ``scale x scale`` block."""
    _check_4d(x, "upsample_nearest")
    if not isinstance(scale, (int, np.integer)) or scale < 1:
        raise ConfigError(f"upsample scale must be an integer >= 1, got {scale}")
    if scale == 1:
        return x
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, scale, axis=2), scale, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, scale, W, scale).sum(axis=(3, 5)),)

    return Tensor.from_op(out, (x,), backward)


def resize_nearest(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather ``x[:, :, rows[:, None], cols[None, :]]`` with a scatter-add backward."""
    _check_4d(x, "resize_nearest")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = x.data[:, :, rows[:, None], cols[None, :]]
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), rows[:, None], cols[None, :]), g)
        return (gx,)

    return Tensor.from_op(out, (x,), backward)


def nearest_indices(src: int, dst: int) -> np.ndarray:
    """Source index for each of ``dst`` output positions under nearest resizing."""
    return np.minimum((np.arange(dst) * src) // dst, src - 1)


def crop(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left ``height x width`` corner."""
    if x.shape[2] == height and x.shape[3] == width:
        return x
    if x.shape[2] < height or x.shape[3] < width:
        raise DimensionError(f"cannot crop {x.shape} to {(height, width)}")
    return x[:, :, :height, :width]


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Stack tensors along ``axis`` in argument order."""
    xs = [as_tensor(t) for t in xs]
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for k, (a, b) in enumerate(zip(t.shape, ref)) if k != axis % len(ref)):
            raise DimensionError(f"concat: shapes {[t.shape for t in xs]} disagree off axis {axis}")
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in xs], axis=axis)
    return Tensor.from_op(out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis with ``weight`` of shape ``[in, out]``."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if x.ndim == 2:
        out = x @ weight
    else:
        lead = x.shape[:-1]
        out = (x.reshape(-1, x.shape[-1]) @ weight).reshape(lead + (weight.shape[1],))
    return out + bias if bias is not None else out
