"""ScConv preprocessing (SRU + CRU), detection heads and box decoding."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .evalkit import DetectionRecord
from .nn import Conv2d, ConvBlock, Module
from .tensor import Parameter, ShapeError, Tensor


@dataclass(frozen=True)
class SRUConfig:
    threshold: float = 0.4
    eps: float = 1e-5

    def __post_init__(self):
        if not 0.0 <= self.threshold < 1.0:
            raise ValueError(f"gate threshold must lie in [0, 1), got {self.threshold}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass(frozen=True)
class CRUConfig:
    alpha: float = 0.5
    squeeze: int = 2
    groups: int = 2
    kernel: int = 3
    # "low": Y1 = GWC(up) + PWC(low), as printed; "up": PWC reads the upper part
    pwc_source: str = "low"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.pwc_source not in ("low", "up"):
            raise ValueError(f"pwc_source must be 'low' or 'up', got {self.pwc_source!r}")

    def widths(self, c: int) -> dict:
        """Channel algebra for ``c`` input channels; raises on non-integral widths."""
        up = self.alpha * c
        problems = []
        if abs(up - round(up)) > 1e-9:
            problems.append(f"alpha*C = {up} is not integral")
        up = int(round(up))
        low = c - up
        if up % self.squeeze or low % self.squeeze:
            problems.append(f"split ({up}, {low}) not divisible by squeeze ratio {self.squeeze}")
        sq_up, sq_low = up // self.squeeze, low // self.squeeze
        if sq_up % self.groups or c % self.groups:
            problems.append(f"GWC groups {self.groups} must divide {sq_up} and {c}")
        if c - sq_low < 1:
            problems.append("PWC branch of Y2 would have no channels")
        if problems:
            raise ValueError(f"CRU channel algebra fails for C={c}: " + "; ".join(problems))
        return {"up": up, "low": low, "sq_up": sq_up, "sq_low": sq_low,
                "y2_pwc": c - sq_low}


class SRU(Module):
    """Spatial reconstruction unit with a hard threshold gate.

    GroupNorm runs with one group per channel so each channel owns a scale.
    The gate has zero derivative almost everywhere; inside
    :func:`frozen_gates` the mask computed on the first forward is reused,
    which makes finite-difference checks of the differentiable path sound.
    """

    def __init__(self, channels: int, cfg: SRUConfig = SRUConfig()):
        if channels % 2:
            raise ValueError(f"SRU needs an even channel count, got {channels}")
        self.gamma = Parameter(np.ones(channels), "ones")
        self.beta = Parameter(np.zeros(channels), "zeros")
        self.threshold = cfg.threshold
        self.eps = cfg.eps
        self._freeze = False
        self._mask: Optional[np.ndarray] = None

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def gate(self, x: Tensor) -> np.ndarray:
        """Boolean informative mask W1 (W2 is its complement)."""
        c = self.channels
        if x.shape[1] != c:
            raise ShapeError(f"SRU expects {c} channels, got {x.shape[1]}")
        total = self.gamma.data.sum()
        if total <= 0:
            raise ValueError("SRU GroupNorm scales must have a positive sum")
        if self._freeze and self._mask is not None:
            return self._mask
        xg = x.data.reshape(x.shape[0], c, -1)
        xhat = (xg - xg.mean(axis=2, keepdims=True)) / np.sqrt(xg.var(axis=2, keepdims=True) + self.eps)
        gn = self.gamma.data[None, :, None] * xhat + self.beta.data[None, :, None]
        w = self.gamma.data / total
        reweight = ops._sigmoid(gn * w[None, :, None]).reshape(x.shape)
        mask = reweight >= self.threshold
        if self._freeze:
            self._mask = mask
        return mask

    def forward(self, x: Tensor) -> Tensor:
        w1 = self.gate(x)
        x1 = x * w1.astype(np.float64)
        x2 = x * (~w1).astype(np.float64)
        half = self.channels // 2
        x11, x12 = ops.split_channels(x1, [half, half])
        x21, x22 = ops.split_channels(x2, [half, half])
        return ops.concat_channels([x11 + x22, x21 + x12])

    def trace(self, tracer, labels):
        half = len(labels) // 2
        for i in range(half):
            tracer.union(labels[i], labels[i + half])
        tracer.norm(self, labels)
        return labels


@contextlib.contextmanager
def frozen_gates(module: Module):
    """Reuse each SRU's first mask for every forward inside the block."""
    srus = [m for m in module.modules() if isinstance(m, SRU)]
    for s in srus:
        s._freeze, s._mask = True, None
    try:
        yield
    finally:
        for s in srus:
            s._freeze, s._mask = False, None


class CRU(Module):
    """Channel reconstruction unit.

    Split (alpha*C | rest), 1x1 squeeze each part by r; Y1 = GWC(up) + PWC(low),
    Y2 = concat(PWC'(low), low); per-channel softmax over the pooled Y1, Y2
    gives eta1 + eta2 = 1; Y = eta1*Y1 + eta2*Y2.
    """

    def __init__(self, channels: int, cfg: CRUConfig = CRUConfig()):
        w = cfg.widths(channels)
        c = channels
        self.pwc_source = cfg.pwc_source
        self.squeeze_up = Conv2d(w["up"], w["sq_up"], 1, bias=False)
        self.squeeze_low = Conv2d(w["low"], w["sq_low"], 1, bias=False)
        self.gwc = Conv2d(w["sq_up"], c, cfg.kernel, groups=cfg.groups, bias=True)
        pwc_in = w["sq_low"] if cfg.pwc_source == "low" else w["sq_up"]
        self.pwc1 = Conv2d(pwc_in, c, 1, bias=False)
        self.pwc2 = Conv2d(w["sq_low"], w["y2_pwc"], 1, bias=False)

    @property
    def split_sizes(self) -> tuple:
        return self.squeeze_up.in_channels, self.squeeze_low.in_channels

    def branches(self, x: Tensor) -> tuple:
        if x.shape[1] != sum(self.split_sizes):
            raise ShapeError(f"CRU expects {sum(self.split_sizes)} channels, got {x.shape[1]}")
        up, low = ops.split_channels(x, self.split_sizes)
        up = self.squeeze_up(up)
        low = self.squeeze_low(low)
        y1 = self.gwc(up) + self.pwc1(low if self.pwc_source == "low" else up)
        y2 = ops.concat_channels([self.pwc2(low), low])
        return y1, y2

    def fusion_weights(self, y1: Tensor, y2: Tensor) -> tuple:
        n, c = y1.shape[:2]
        s = ops.concat_channels([ops.adaptive_avg_pool_1x1(y1), ops.adaptive_avg_pool_1x1(y2)])
        eta = ops.softmax(ops.reshape(s, (n, 2, c, 1, 1)), axis=1)
        eta1, eta2 = ops.split_channels(ops.reshape(eta, (n, 2 * c, 1, 1)), [c, c])
        return eta1, eta2

    def forward(self, x: Tensor) -> Tensor:
        y1, y2 = self.branches(x)
        eta1, eta2 = self.fusion_weights(y1, y2)
        return eta1 * y1 + eta2 * y2

    def trace(self, tracer, labels):
        n_up = self.split_sizes[0]
        up = self.squeeze_up.trace(tracer, labels[:n_up])
        low = self.squeeze_low.trace(tracer, labels[n_up:])
        y1 = self.gwc.trace(tracer, up)
        p1 = self.pwc1.trace(tracer, low if self.pwc_source == "low" else up)
        y2 = self.pwc2.trace(tracer, low) + low
        for a, b, c in zip(y1, p1, y2):
            tracer.union(a, b)
            tracer.union(a, c)
        return y1


class ScConv(Module):
    def __init__(self, channels: int, sru: SRUConfig = SRUConfig(), cru: CRUConfig = CRUConfig()):
        self.sru = SRU(channels, sru)
        self.cru = CRU(channels, cru)

    def forward(self, x: Tensor) -> Tensor:
        return self.cru(self.sru(x))

    def trace(self, tracer, labels):
        return self.cru.trace(tracer, self.sru.trace(tracer, labels))


class DetectLevel(Module):
    """One pyramid level: optional ScConv, then box and class branches."""

    def __init__(self, c: int, c_box: int, c_cls: int, nc: int, scconv: Optional[ScConv]):
        self.pre = scconv
        c_mid = c
        self.box_conv = ConvBlock(c_mid, c_box, 3)
        self.box_out = Conv2d(c_box, 4, 1, pin_out=True)
        self.cls_conv = ConvBlock(c_mid, c_cls, 3)
        self.cls_out = Conv2d(c_cls, nc, 1, pin_out=True)

    def forward(self, x: Tensor) -> tuple:
        if self.pre is not None:
            x = self.pre(x)
        return self.box_out(self.box_conv(x)), self.cls_out(self.cls_conv(x))

    def trace(self, tracer, labels):
        if self.pre is not None:
            labels = self.pre.trace(tracer, labels)
        self.box_out.trace(tracer, self.box_conv.trace(tracer, labels))
        self.cls_out.trace(tracer, self.cls_conv.trace(tracer, labels))


class DetectHead(Module):
    """Per-level box (l, t, r, b distances) and class logit maps.

    ``scconv=True`` gives SC_Detect; ``False`` the plain two-branch head.
    """

    def __init__(self, channels: tuple, nc: int, scconv: bool = True,
                 sru: SRUConfig = SRUConfig(), cru: CRUConfig = CRUConfig(),
                 strides: tuple = (8, 16, 32)):
        if len(channels) != len(strides):
            raise ValueError("one stride per level required")
        c_box = max(16, channels[0] // 4)
        c_cls = max(channels[0], min(nc, 100))
        self.nc = nc
        self.strides = tuple(strides)
        self.levels = [
            DetectLevel(c, c_box, c_cls, nc, ScConv(c, sru, cru) if scconv else None)
            for c in channels
        ]

    def forward(self, *feats: Tensor) -> list:
        if len(feats) != len(self.levels):
            raise ShapeError(f"expected {len(self.levels)} levels, got {len(feats)}")
        for f, level in zip(feats, self.levels):
            want = level.box_conv.in_channels if level.pre is None else \
                sum(level.pre.cru.split_sizes)
            if f.shape[1] != want:
                raise ShapeError(f"level expects {want} channels, got {f.shape[1]}")
        return [level(f) for f, level in zip(feats, self.levels)]

    def trace(self, tracer, *labels):
        for level, lab in zip(self.levels, labels):
            level.trace(tracer, lab)


def SCDetect(channels: tuple, nc: int, **kw) -> DetectHead:
    return DetectHead(channels, nc, scconv=True, **kw)


# ---------------------------------------------------------------------------
# decoding

def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, 4) and (M, 4) xyxy arrays."""
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list:
    """Greedy NMS; returns kept indices in descending score order."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(scores), dtype=bool)
    iou = box_iou_matrix(boxes, boxes)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= iou[i] > iou_thresh
    return keep


def decode_detections(box_maps, cls_maps, strides=(8, 16, 32), conf_thresh: float = 0.25,
                      nms_iou: float = 0.65, image_ids=None) -> list:
    """Turn raw per-level maps into scored boxes.

    Each cell (i, j) of a stride-s level has centre ((j + .5) s, (i + .5) s);
    distances are softplus(raw) in stride units; the score is the sigmoid of
    the best class logit.  Greedy NMS runs per image and class.
    """
    box_maps = [m.data if isinstance(m, Tensor) else np.asarray(m) for m in box_maps]
    cls_maps = [m.data if isinstance(m, Tensor) else np.asarray(m) for m in cls_maps]
    n = box_maps[0].shape[0]
    if image_ids is None:
        image_ids = [str(i) for i in range(n)]
    records = []
    for b in range(n):
        boxes, scores, classes = [], [], []
        for bm, cm, s in zip(box_maps, cls_maps, strides):
            _, _, h, w = bm.shape
            logits = cm[b].reshape(cm.shape[1], -1)
            cls = logits.argmax(axis=0)
            best = logits[cls, np.arange(h * w)]
            with np.errstate(over="ignore", invalid="ignore"):
                score = np.where(np.isneginf(best), 0.0, 1.0 / (1.0 + np.exp(-best)))
            keep = score >= conf_thresh
            if not keep.any():
                continue
            # floor keeps boxes well ordered when softplus underflows
            dist = np.maximum(_softplus(bm[b].reshape(4, -1)[:, keep]), 1e-9) * s
            ii, jj = np.divmod(np.arange(h * w)[keep], w)
            cx, cy = (jj + 0.5) * s, (ii + 0.5) * s
            boxes.append(np.stack([cx - dist[0], cy - dist[1], cx + dist[2], cy + dist[3]], 1))
            scores.append(score[keep])
            classes.append(cls[keep])
        if not boxes:
            continue
        boxes, scores, classes = map(np.concatenate, (boxes, scores, classes))
        for c in np.unique(classes):
            idx = np.flatnonzero(classes == c)
            for k in nms(boxes[idx], scores[idx], nms_iou):
                i = idx[k]
                records.append(DetectionRecord(image_ids[b], int(c), tuple(boxes[i]),
                                               float(scores[i])))
    return records
