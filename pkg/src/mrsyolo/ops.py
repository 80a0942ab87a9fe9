"""Differentiable tensor operations.

Each op computes its result with numpy and, when recording is enabled,
attaches a closure that maps the output gradient to input gradients.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .profiler import record_flops
from .tensor import ShapeError, Tensor, accumulate, as_tensor, make_result


def _pair(v) -> tuple:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data)
    out = a.data + b.data
    record_flops(out.size)

    def backward(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(g, b.shape))

    return make_result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data)
    out = a.data - b.data
    record_flops(out.size)

    def backward(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(-g, b.shape))

    return make_result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data)
    out = a.data * b.data
    record_flops(out.size)

    def backward(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(g * a.data, b.shape))

    return make_result(out, (a, b), backward)


def elementwise(a, b, op: str) -> Tensor:
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "sub":
        return sub(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for any finite input
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    record_flops(s.size)

    def backward(g):
        accumulate(x, g * s * (1.0 - s))

    return make_result(s, (x,), backward)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s
    record_flops(out.size)

    def backward(g):
        accumulate(x, g * s * (1.0 + x.data * (1.0 - s)))

    return make_result(out, (x,), backward)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "silu":
        return silu(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    record_flops(out.size)

    def backward(g):
        accumulate(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return make_result(out, (x,), backward)


# ---------------------------------------------------------------------------
# shape plumbing

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        accumulate(x, g.reshape(x.shape))

    return make_result(out, (x,), backward)


def split_channels(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list:
    sizes = [int(s) for s in sizes]
    if any(s < 0 for s in sizes) or sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not sum to {x.shape[axis]}")
    bounds = np.cumsum([0] + sizes)
    outs = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        index = [slice(None)] * x.ndim
        index[axis] = slice(int(lo), int(hi))
        index = tuple(index)

        def backward(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            accumulate(x, full)

        outs.append(make_result(x.data[index].copy(), (x,), backward))
    return outs


def concat_channels(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(
                o != r for i, (o, r) in enumerate(zip(other, ref)) if i != axis):
            raise ShapeError(f"concat shape mismatch: {tuple(ref)} vs {tuple(other)}")
    out = np.concatenate([t.data for t in xs], axis=axis)
    sizes = [t.shape[axis] for t in xs]

    def backward(g):
        parts = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        for t, p in zip(xs, parts):
            accumulate(t, p)

    return make_result(out, tuple(xs), backward)


# ---------------------------------------------------------------------------
# pooling and resampling

def adaptive_avg_pool_1x1(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError(f"empty spatial dims {x.shape}")
    out = x.data.mean(axis=(2, 3), keepdims=True)
    record_flops(out.size)

    def backward(g):
        accumulate(x, np.broadcast_to(g / (h * w), x.shape))

    return make_result(out, (x,), backward)


def max_pool2d(x: Tensor, k, stride=None, padding=0) -> Tensor:
    kh, kw = _pair(k)
    sh, sw = _pair(stride if stride is not None else k)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    ho, wo = (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool window {k} does not fit input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kh * kw)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    record_flops(out.size)

    def backward(g):
        gp = np.zeros_like(xp)
        ni, ci, yi, xi = np.indices((n, c, ho, wo))
        rows = yi * sh + idx // kw
        cols = xi * sw + idx % kw
        np.add.at(gp, (ni, ci, rows, cols), g)
        accumulate(x, gp[:, :, ph:ph + h, pw:pw + w])

    return make_result(out, (x,), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        accumulate(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return make_result(out, (x,), backward)


def resize_nearest(x: Tensor, size) -> Tensor:
    """Nearest-neighbour resize to ``size``: source index floor(i * in / out)."""
    n, c, h, w = x.shape
    ho, wo = _pair(size)
    if (ho, wo) == (h, w):
        return x
    if ho == 2 * h and wo == 2 * w:
        return upsample_nearest2x(x)
    ri = (np.arange(ho) * h) // ho
    ci = (np.arange(wo) * w) // wo
    out = x.data[:, :, ri][:, :, :, ci]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), slice(None), ri[:, None], ci[None, :]), g)
        accumulate(x, gx)

    return make_result(out, (x,), backward)


# ---------------------------------------------------------------------------
# convolution and normalization

def conv_output_size(h: int, w: int, k, stride=1, padding=0) -> tuple:
    kh, kw = _pair(k)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor = None, stride=1, padding=0,
           groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation on NCHW input.

    ``weight`` has shape (c_out, c_in // groups, k_h, k_w).  Depthwise mode is
    ``groups == c_in == c_out``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    co, cig, kh, kw = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if groups < 1 or c % groups or co % groups:
        raise ShapeError(f"groups={groups} must divide c_in={c} and c_out={co}")
    if cig * groups != c:
        raise ShapeError(f"input has {c} channels, weight expects {cig * groups}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"bias shape {bias.shape} != ({co},)")
    ho, wo = conv_output_size(h, w, (kh, kw), (sh, sw), (ph, pw))
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {(kh, kw)} does not fit input {x.shape} with padding {(ph, pw)}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    cog = co // groups
    depthwise = cig == 1 and cog == 1
    if depthwise:
        out = np.einsum("nchwij,cij->nchw", win, weight.data[:, 0], optimize=True)
    elif groups == 1:
        out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        wg = win.reshape(n, groups, cig, ho, wo, kh, kw)
        out = np.einsum("ngchwij,gocij->ngohw", wg,
                        weight.data.reshape(groups, cog, cig, kh, kw), optimize=True)
        out = out.reshape(n, co, ho, wo)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    record_flops(2 * co * cig * kh * kw * ho * wo * n)

    def backward(g):
        if bias is not None:
            accumulate(bias, g.sum(axis=(0, 2, 3)))
        if depthwise:
            if weight.requires_grad:
                accumulate(weight, np.einsum("nchwij,nchw->cij", win, g, optimize=True)[:, None])
            gwin = None if not x.requires_grad else \
                np.einsum("cij,nchw->nchwij", weight.data[:, 0], g, optimize=True)
        elif groups == 1:
            if weight.requires_grad:
                accumulate(weight, np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
            gwin = None if not x.requires_grad else \
                np.tensordot(g, weight.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        else:
            gg = g.reshape(n, groups, cog, ho, wo)
            wg = win.reshape(n, groups, cig, ho, wo, kh, kw)
            if weight.requires_grad:
                gw = np.einsum("ngchwij,ngohw->gocij", wg, gg, optimize=True)
                accumulate(weight, gw.reshape(weight.shape))
            gwin = None if not x.requires_grad else np.einsum(
                "gocij,ngohw->ngchwij", weight.data.reshape(groups, cog, cig, kh, kw), gg,
                optimize=True).reshape(n, c, ho, wo, kh, kw)
        if gwin is not None:
            gp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += gwin[..., i, j]
            accumulate(x, gp[:, :, ph:ph + h, pw:pw + w])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def group_norm(x: Tensor, num_groups: int, scale: Tensor, shift: Tensor,
               eps: float = 1e-5) -> Tensor:
    """scale * (x - mean) / sqrt(var + eps) + shift, statistics per (sample, group)."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    n, c, h, w = x.shape
    if num_groups < 1 or c % num_groups:
        raise ShapeError(f"num_groups={num_groups} must divide channels={c}")
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"affine params must have shape ({c},)")
    xg = x.data.reshape(n, num_groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    lam = scale.data[None, :, None, None]
    out = lam * xhat + shift.data[None, :, None, None]
    record_flops(out.size)

    def backward(g):
        accumulate(scale, (g * xhat).sum(axis=(0, 2, 3)))
        accumulate(shift, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gh = (g * lam).reshape(n, num_groups, -1)
            xh = xhat.reshape(n, num_groups, -1)
            gx = inv * (gh - gh.mean(axis=2, keepdims=True)
                        - xh * (gh * xh).mean(axis=2, keepdims=True))
            accumulate(x, gx.reshape(x.shape))

    return make_result(out, (x, scale, shift), backward)
