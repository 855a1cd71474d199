"""Differentiable primitives on rank-4 ``(n, c, h, w)`` tensors.

Conventions fixed here and relied on by the reference oracles:

* convolution is cross-correlation (no kernel flip) with zero padding;
* max pooling pads with ``-inf`` and routes the gradient to the first
  maximum in row-major window order;
* bilinear resizing uses half-pixel centres, ``src = (dst + 0.5) * in / out - 0.5``,
  clamped to ``[0, in - 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .engine import Tensor, record
from .errors import LabelError, ShapeError

IGNORE_LABEL = 255


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int] = (3, 3)
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (1, 1)
    has_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive", dim="channels")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ShapeError("kernel/stride must be >= 1 and padding >= 0", dim="kernel")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels) + self.kernel

    def output_hw(self, h: int, w: int) -> Tuple[int, int]:
        oh = out_size(h, self.kernel[0], self.stride[0], self.padding[0])
        ow = out_size(w, self.kernel[1], self.stride[1], self.padding[1])
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"conv output size {oh}x{ow} is not positive for input {h}x{w}", dim="spatial"
            )
        return oh, ow


def _check4(x: Tensor, what: str):
    if x.ndim != 4:
        raise ShapeError(f"{what} must be rank 4 (n, c, h, w), got shape {x.shape}", dim="rank")


# ---------------------------------------------------------------- convolution


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           spec: Optional[ConvSpec] = None) -> Tensor:
    _check4(x, "conv2d input")
    if spec is None:
        o, c, kh, kw = weight.shape
        spec = ConvSpec(c, o, (kh, kw), (1, 1), (kh // 2, kw // 2), bias is not None)
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"conv2d input has {c} channels, spec expects {spec.in_channels}",
                         dim="in_channels")
    if tuple(weight.shape) != spec.weight_shape:
        raise ShapeError(f"conv2d weight shape {tuple(weight.shape)} != {spec.weight_shape}",
                         dim="weight")
    if bias is not None and tuple(bias.shape) != (spec.out_channels,):
        raise ShapeError(f"conv2d bias shape {tuple(bias.shape)} != ({spec.out_channels},)",
                         dim="bias")
    oh, ow = spec.output_hw(h, w)
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    o = spec.out_channels

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :oh, :ow]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out, dtype=np.result_type(xd, weight.data))

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, oh, ow, c, kh, kw)
            dcols = np.ascontiguousarray(dcols.transpose(4, 5, 0, 3, 1, 2))
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw] += dcols[i, j]
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", out, inputs, backward)


# ---------------------------------------------------------------- max pooling


def maxpool2d(x: Tensor, window=(5, 5), stride=(1, 1), padding=(2, 2)) -> Tensor:
    _check4(x, "maxpool2d input")
    (kh, kw), (sh, sw), (ph, pw) = _pair(window), _pair(stride), _pair(padding)
    n, c, h, w = x.shape
    oh, ow = out_size(h, kh, sh, ph), out_size(w, kw, sw, pw)
    if oh < 1 or ow < 1:
        raise ShapeError(f"maxpool output size {oh}x{ow} is not positive for input {h}x{w}",
                         dim="spatial")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf)
    hp, wp = xp.shape[2:]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :oh, :ow]
    win = win.reshape(n, c, oh, ow, kh * kw)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        rows = np.arange(oh)[:, None] * sh + arg // kw
        cols = np.arange(ow)[None, :] * sw + arg % kw
        plane = np.arange(n * c).reshape(n, c, 1, 1) * (hp * wp)
        flat = (plane + rows * wp + cols).ravel()
        gp = np.bincount(flat, weights=g.ravel(), minlength=n * c * hp * wp)
        gp = gp.reshape(n, c, hp, wp)[:, :, ph:ph + h, pw:pw + w]
        return (gp.astype(g.dtype),)

    return record("maxpool2d", np.ascontiguousarray(out), (x,), backward)


# ---------------------------------------------------------------- pointwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def backward(g):
        return (g * mask,)

    return record("relu", out, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add operands differ in shape: {a.shape} vs {b.shape}", dim="shape")

    def backward(g):
        return g, g

    return record("add", a.data + b.data, (a, b), backward)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)`` with ``weights`` held constant."""
    weights = np.asarray(weights, dtype=x.dtype)
    if weights.shape != x.shape:
        raise ShapeError(f"weights shape {weights.shape} != {x.shape}", dim="shape")

    def backward(g):
        return (g * weights,)

    return record("weighted_sum", np.asarray(np.sum(x.data * weights)), (x,), backward)


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    _check4(x, "crop input")
    n, c, h, w = x.shape
    if top < 0 or left < 0 or top + height > h or left + width > w or height < 1 or width < 1:
        raise ShapeError(f"crop window ({top},{left},{height},{width}) outside {h}x{w}",
                         dim="spatial")
    out = np.ascontiguousarray(x.data[:, :, top:top + height, left:left + width])

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, top:top + height, left:left + width] = g
        return (gx,)

    return record("crop", out, (x,), backward)


# ---------------------------------------------------------------- resizing


def bilinear_taps(in_size: int, out_size_: int):
    """Source indices and fractional weight for each output coordinate."""
    d = np.arange(out_size_, dtype=np.float64)
    s = (d + 0.5) * (in_size / out_size_) - 0.5
    s = np.clip(s, 0.0, in_size - 1)
    i0 = np.floor(s).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = s - i0
    return i0, i1, frac


def bilinear_matrix(in_size: int, out_size_: int) -> np.ndarray:
    """Dense ``(out, in)`` interpolation matrix; rows sum to one."""
    i0, i1, f = bilinear_taps(in_size, out_size_)
    m = np.zeros((out_size_, in_size))
    rows = np.arange(out_size_)
    np.add.at(m, (rows, i0), 1.0 - f)
    np.add.at(m, (rows, i1), f)
    return m


def resize_array(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes of a plain array."""
    h, w = a.shape[-2:]
    if (h, w) == (out_h, out_w):
        return a.copy()
    y0, y1, fy = bilinear_taps(h, out_h)
    x0, x1, fx = bilinear_taps(w, out_w)
    fy = fy.astype(a.dtype)[:, None]
    fx = fx.astype(a.dtype)
    top = a[..., y0, :]
    rows = top + fy * (a[..., y1, :] - top)
    left = rows[..., x0]
    return left + fx * (rows[..., x1] - left)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _check4(x, "bilinear_resize input")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size {out_h}x{out_w} must be positive", dim="spatial")
    h, w = x.shape[2:]
    out = resize_array(x.data, out_h, out_w)

    def backward(g):
        ry = bilinear_matrix(h, out_h).astype(g.dtype)
        rx = bilinear_matrix(w, out_w).astype(g.dtype)
        return (ry.T @ g @ rx,)

    return record("bilinear_resize", out, (x,), backward)


# ---------------------------------------------------------------- loss


def log_softmax_array(scores: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = scores - scores.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_array(scores: np.ndarray, axis: int = 1) -> np.ndarray:
    e = np.exp(scores - scores.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_xent(scores: Tensor, target, ignore_label: int = IGNORE_LABEL) -> Tensor:
    """Mean per-pixel softmax cross-entropy over non-ignored pixels."""
    _check4(scores, "softmax_xent scores")
    n, k, h, w = scores.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} != {(n, h, w)}", dim="target")
    target = target.astype(np.int64)
    valid = target != ignore_label
    bad = valid & ((target < 0) | (target >= k))
    if bad.any():
        b, i, j = (int(v[0]) for v in np.nonzero(bad))
        raise LabelError(f"label {target[b, i, j]} at (n={b}, y={i}, x={j}) outside [0, {k})")
    count = int(valid.sum())
    safe = np.where(valid, target, 0)
    logp = log_softmax_array(scores.data)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count if count else 0.0
    loss = np.asarray(loss, dtype=scores.dtype)

    def backward(g):
        if not count:
            return (np.zeros_like(scores.data),)
        p = np.exp(logp)
        np.put_along_axis(p, safe[:, None], np.take_along_axis(p, safe[:, None], axis=1) - 1.0,
                          axis=1)
        return (p * valid[:, None] * (g / count),)

    return record("softmax_xent", loss, (scores,), backward)
