"""Re-calibration attention fusion (RAU, SBA) and the two pyramid necks."""

from __future__ import annotations

from . import ops
from .blocks import C3k2
from .nn import Conv2d, ConvBlock, Module
from .tensor import ShapeError, Tensor


class RAU(Module):
    """Re-calibration attention unit.

    With P1, P2 the d-channel 1x1 projections of ``f1`` and ``f2`` (``P2``
    resized to ``f1``'s grid) and gates G1 = sigmoid(theta(f1)),
    G2 = sigmoid(delta(f2)), returns G1*P1 + G2*P2*(1 - G1) + P1.
    """

    def __init__(self, c1: int, c2: int, d: int):
        self.proj1 = Conv2d(c1, d, 1)
        self.theta = Conv2d(c1, d, 1)
        self.proj2 = Conv2d(c2, d, 1)
        self.delta = Conv2d(c2, d, 1)

    def _terms(self, f1: Tensor, f2: Tensor):
        if f1.shape[0] != f2.shape[0]:
            raise ShapeError(f"batch mismatch: {f1.shape[0]} vs {f2.shape[0]}")
        size = f1.shape[2:]
        p1 = self.proj1(f1)
        g1 = ops.sigmoid(self.theta(f1))
        p2 = ops.resize_nearest(self.proj2(f2), size)
        g2 = ops.resize_nearest(ops.sigmoid(self.delta(f2)), size)
        return p1, g1, p2, g2

    def gates(self, f1: Tensor, f2: Tensor) -> tuple:
        _, g1, _, g2 = self._terms(f1, f2)
        return g1, g2

    def forward(self, f1: Tensor, f2: Tensor) -> Tensor:
        p1, g1, p2, g2 = self._terms(f1, f2)
        return g1 * p1 + g2 * p2 * (1.0 - g1) + p1

    def trace(self, tracer, l1, l2):
        outs = [self.proj1.trace(tracer, l1), self.theta.trace(tracer, l1),
                self.proj2.trace(tracer, l2), self.delta.trace(tracer, l2)]
        for other in outs[1:]:
            for a, b in zip(outs[0], other):
                tracer.union(a, b)
        return outs[0]


class SBA(Module):
    """Selective boundary aggregation of a deep map ``f_h`` and a shallow ``f_l``.

    Output: 3x3 ConvBlock over concat(RAU(f_l, f_h), up(RAU(f_h, f_l))), at
    ``f_l``'s resolution.
    """

    def __init__(self, c_h: int, c_l: int, d: int, c_out: int):
        self.rau_l = RAU(c_l, c_h, d)
        self.rau_h = RAU(c_h, c_l, d)
        self.out = ConvBlock(2 * d, c_out, 3)

    def forward(self, f_h: Tensor, f_l: Tensor) -> Tensor:
        if f_h.shape[0] != f_l.shape[0]:
            raise ShapeError(f"batch mismatch: {f_h.shape[0]} vs {f_l.shape[0]}")
        if f_l.shape[2] < f_h.shape[2] or f_l.shape[3] < f_h.shape[3]:
            raise ShapeError(f"shallow map {f_l.shape} smaller than deep map {f_h.shape}")
        shallow = self.rau_l(f_l, f_h)
        deep = ops.resize_nearest(self.rau_h(f_h, f_l), f_l.shape[2:])
        return self.out(ops.concat_channels([shallow, deep]))

    def trace(self, tracer, l_h, l_l):
        a = self.rau_l.trace(tracer, l_l, l_h)
        b = self.rau_h.trace(tracer, l_h, l_l)
        return self.out.trace(tracer, a + b)


def _check_pyramid(c3: Tensor, c4: Tensor, c5: Tensor) -> None:
    if not (c3.shape[0] == c4.shape[0] == c5.shape[0]):
        raise ShapeError("pyramid levels disagree on batch size")
    for fine, coarse in ((c3, c4), (c4, c5)):
        if fine.shape[2] != 2 * coarse.shape[2] or fine.shape[3] != 2 * coarse.shape[3]:
            raise ShapeError(f"levels {fine.shape} and {coarse.shape} are not a stride-2 pair")


class RCFPN(Module):
    """Top-down SBA pathway plus bottom-up downsample/concat pathway.

    D5 = C3k2(c5); D4 = C3k2(SBA(D5, c4)); N3 = C3k2(SBA(D4, c3));
    N4 = C3k2(concat(down(N3), D4)); N5 = C3k2(concat(down(N4), D5)).
    """

    def __init__(self, channels_in: tuple, channels_out: tuple, n: int = 1,
                 d: tuple = None, makdf: bool = True):
        c3, c4, c5 = channels_in
        o3, o4, o5 = channels_out
        d4, d3 = (o4, o3) if d is None else (d[1], d[0])
        self.d5 = C3k2(c5, o5, n, makdf)
        self.sba4 = SBA(o5, c4, d4, o4)
        self.td4 = C3k2(o4, o4, n, makdf)
        self.sba3 = SBA(o4, c3, d3, o3)
        self.td3 = C3k2(o3, o3, n, makdf)
        self.down3 = ConvBlock(o3, o3, 3, 2)
        self.bu4 = C3k2(o3 + o4, o4, n, makdf)
        self.down4 = ConvBlock(o4, o4, 3, 2)
        self.bu5 = C3k2(o4 + o5, o5, n, makdf)

    def forward(self, c3: Tensor, c4: Tensor, c5: Tensor) -> tuple:
        _check_pyramid(c3, c4, c5)
        d5 = self.d5(c5)
        d4 = self.td4(self.sba4(d5, c4))
        n3 = self.td3(self.sba3(d4, c3))
        n4 = self.bu4(ops.concat_channels([self.down3(n3), d4]))
        n5 = self.bu5(ops.concat_channels([self.down4(n4), d5]))
        return n3, n4, n5

    def trace(self, tracer, l3, l4, l5):
        d5 = self.d5.trace(tracer, l5)
        d4 = self.td4.trace(tracer, self.sba4.trace(tracer, d5, l4))
        n3 = self.td3.trace(tracer, self.sba3.trace(tracer, d4, l3))
        n4 = self.bu4.trace(tracer, self.down3.trace(tracer, n3) + d4)
        n5 = self.bu5.trace(tracer, self.down4.trace(tracer, n4) + d5)
        return n3, n4, n5


class ConcatFPN(Module):
    """Baseline neck: upsample/concat top-down, downsample/concat bottom-up."""

    def __init__(self, channels_in: tuple, channels_out: tuple, n: int = 1,
                 makdf: bool = False):
        c3, c4, c5 = channels_in
        o3, o4, o5 = channels_out
        self.td4 = C3k2(c5 + c4, o4, n, makdf)
        self.td3 = C3k2(o4 + c3, o3, n, makdf)
        self.down3 = ConvBlock(o3, o3, 3, 2)
        self.bu4 = C3k2(o3 + o4, o4, n, makdf)
        self.down4 = ConvBlock(o4, o4, 3, 2)
        self.bu5 = C3k2(o4 + c5, o5, n, makdf)

    def forward(self, c3: Tensor, c4: Tensor, c5: Tensor) -> tuple:
        _check_pyramid(c3, c4, c5)
        t4 = self.td4(ops.concat_channels([ops.upsample_nearest2x(c5), c4]))
        n3 = self.td3(ops.concat_channels([ops.upsample_nearest2x(t4), c3]))
        n4 = self.bu4(ops.concat_channels([self.down3(n3), t4]))
        n5 = self.bu5(ops.concat_channels([self.down4(n4), c5]))
        return n3, n4, n5

    def trace(self, tracer, l3, l4, l5):
        t4 = self.td4.trace(tracer, l5 + l4)
        n3 = self.td3.trace(tracer, t4 + l3)
        n4 = self.bu4.trace(tracer, self.down3.trace(tracer, n3) + t4)
        n5 = self.bu5.trace(tracer, self.down4.trace(tracer, n4) + l5)
        return n3, n4, n5
