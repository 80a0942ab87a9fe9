"""Backbone blocks: AKDC, MAKDF, C3k2 (plain and MAKDF flavour) and SPPF."""

from __future__ import annotations

import numpy as np

from . import ops
from .nn import Conv2d, ConvBlock, Module
from .tensor import ShapeError, Tensor

MAKDF_KERNELS = (1, 3, 5)


def band_length(k: int) -> int:
    """Length M of the 1xM / Mx1 band kernels paired with a KxK kernel."""
    return 3 * k + 2


def balanced_partition(c: int, parts: int = 3) -> tuple:
    """Split ``c`` into ``parts`` sizes differing by at most one, larger first."""
    base, rem = divmod(c, parts)
    return tuple(base + (i < rem) for i in range(parts))


class AKDC(Module):
    """Adaptive kernel depthwise convolution.

    Three depthwise branches (KxK, 1xM, Mx1 with M = 3K + 2) see the same
    input.  A linear map on the globally pooled input yields one logit per
    branch per channel; a softmax over the branch axis turns those into
    fusion weights.  ``weight_gen`` starts at zero, so a freshly initialized
    block averages its branches.
    """

    def __init__(self, channels: int, k: int):
        if k < 1 or k % 2 == 0:
            raise ValueError(f"AKDC kernel size must be odd and >= 1, got {k}")
        m = band_length(k)
        c = channels
        self.k = k
        self.m = m
        self.square = Conv2d(c, c, (k, k), depthwise=True, bias=False)
        self.band_h = Conv2d(c, c, (1, m), depthwise=True, bias=False)
        self.band_v = Conv2d(c, c, (m, 1), depthwise=True, bias=False)
        self.weight_gen = Conv2d(c, 3 * c, 1, bias=True, init="zeros", protected=True)

    @property
    def channels(self) -> int:
        return self.square.out_channels

    def branch_weights(self, x: Tensor) -> list:
        """Softmax fusion weights, three tensors of shape (n, C, 1, 1)."""
        n, c = x.shape[0], self.channels
        logits = self.weight_gen(ops.adaptive_avg_pool_1x1(x))
        w = ops.softmax(ops.reshape(logits, (n, 3, c, 1, 1)), axis=1)
        return ops.split_channels(ops.reshape(w, (n, 3 * c, 1, 1)), [c, c, c])

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"AKDC expects {self.channels} channels, got {x.shape[1]}")
        w_sq, w_h, w_v = self.branch_weights(x)
        return w_sq * self.square(x) + w_h * self.band_h(x) + w_v * self.band_v(x)

    def trace(self, tracer, labels):
        for conv in (self.square, self.band_h, self.band_v):
            conv.trace(tracer, labels)
        logits = self.weight_gen.trace(tracer, labels)
        c = len(labels)
        for b in range(3):
            for i in range(c):
                tracer.union(logits[b * c + i], labels[i])
        return labels


class MAKDF(Module):
    """Channel 3-split into AKDC(K=1), AKDC(K=3), AKDC(K=5); concat; 1x1 fuse."""

    def __init__(self, channels: int):
        if channels < 3:
            raise ValueError(f"MAKDF needs at least 3 channels, got {channels}")
        sizes = balanced_partition(channels)
        self.branches = [AKDC(g, k) for g, k in zip(sizes, MAKDF_KERNELS)]
        self.fuse = Conv2d(channels, channels, 1, bias=True)

    @property
    def group_sizes(self) -> tuple:
        return tuple(b.channels for b in self.branches)

    def forward(self, x: Tensor) -> Tensor:
        parts = ops.split_channels(x, self.group_sizes)
        feats = [branch(p) for branch, p in zip(self.branches, parts)]
        return self.fuse(ops.concat_channels(feats))

    def trace(self, tracer, labels):
        bounds = np.cumsum((0,) + self.group_sizes)
        parts = [labels[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]
        tracer.balanced(parts)
        outs = [branch.trace(tracer, p) for branch, p in zip(self.branches, parts)]
        return self.fuse.trace(tracer, [l for o in outs for l in o])


class Bottleneck(Module):
    """3x3 ConvBlock followed by MAKDF (or a second 3x3 ConvBlock), with residual."""

    def __init__(self, c_in: int, c_out: int, makdf: bool = True, shortcut: bool = True):
        self.cv1 = ConvBlock(c_in, c_out, 3)
        self.cv2 = MAKDF(c_out) if makdf else ConvBlock(c_out, c_out, 3)
        self.add = shortcut and c_in == c_out

    @property
    def in_channels(self) -> int:
        return self.cv1.in_channels

    def forward(self, x: Tensor) -> Tensor:
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y

    def trace(self, tracer, labels):
        out = self.cv2.trace(tracer, self.cv1.trace(tracer, labels))
        if self.add:
            for a, b in zip(labels, out):
                tracer.union(a, b)
        return out


class C3k2(Module):
    """CSP block: 1x1 to 2h, split (h, h), bottleneck chain on one half,
    every intermediate appended to the concat list, 1x1 to ``c_out``.

    With ``makdf=True`` each bottleneck ends in MAKDF instead of a 3x3 conv.
    """

    def __init__(self, c_in: int, c_out: int, n: int = 1, makdf: bool = True,
                 shortcut: bool = True):
        if c_out % 2:
            raise ValueError(f"C3k2 output channels must be even, got {c_out}")
        if n < 1:
            raise ValueError("C3k2 needs at least one bottleneck")
        h = c_out // 2
        self.cv1 = ConvBlock(c_in, 2 * h, 1)
        self.m = [Bottleneck(h, h, makdf, shortcut) for _ in range(n)]
        self.cv2 = ConvBlock((2 + n) * h, c_out, 1)

    @property
    def split_sizes(self) -> tuple:
        b = self.m[0].in_channels
        return self.cv1.out_channels - b, b

    def forward(self, x: Tensor) -> Tensor:
        y = ops.split_channels(self.cv1(x), self.split_sizes)
        for block in self.m:
            y.append(block(y[-1]))
        return self.cv2(ops.concat_channels(y))

    def trace(self, tracer, labels):
        y = self.cv1.trace(tracer, labels)
        a = self.split_sizes[0]
        parts = [y[:a], y[a:]]
        tracer.balanced(parts)
        for block in self.m:
            parts.append(block.trace(tracer, parts[-1]))
        return self.cv2.trace(tracer, [l for p in parts for l in p])


def C3k2_MAKDF(c_in: int, c_out: int, n: int = 1) -> C3k2:
    return C3k2(c_in, c_out, n, makdf=True)


class SPPF(Module):
    """1x1 reduce, three chained max-pools, concat the four maps, 1x1 expand."""

    def __init__(self, c_in: int, c_out: int, k: int = 5):
        c_ = c_in // 2
        self.cv1 = ConvBlock(c_in, c_, 1)
        self.cv2 = ConvBlock(4 * c_, c_out, 1)
        self.k = k

    def pooled(self, x: Tensor) -> list:
        y = [self.cv1(x)]
        for _ in range(3):
            y.append(ops.max_pool2d(y[-1], self.k, 1, self.k // 2))
        return y

    def forward(self, x: Tensor) -> Tensor:
        return self.cv2(ops.concat_channels(self.pooled(x)))

    def trace(self, tracer, labels):
        y = self.cv1.trace(tracer, labels)
        return self.cv2.trace(tracer, y * 4)
