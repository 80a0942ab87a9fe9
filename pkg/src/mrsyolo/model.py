"""Toy-scale detector graph builder (mrs and baseline variants) with parameter and FLOP accounting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .blocks import SPPF, C3k2
from .head import CRUConfig, DetectHead, SRUConfig
from .neck import RCFPN, ConcatFPN
from .nn import ConvBlock, Module
from .profiler import profiling
from .tensor import Tensor, no_grad

FLOPS_CONVENTION = "conv: 2*c_out*(c_in/groups)*k_h*k_w*h_out*w_out (MAC = 2 FLOPs); " \
                   "other arithmetic: 1 FLOP per output element; data movement: 0"


class ConfigError(ValueError):
    def __init__(self, problems: list):
        self.problems = list(problems)
        super().__init__("invalid model config: " + "; ".join(self.problems))


@dataclass
class ModelConfig:
    widths: tuple = (24, 48, 96, 192)
    depth: int = 1
    num_classes: int = 4
    input_size: tuple = (64, 64)
    variant: str = "mrs"
    gate_threshold: float = 0.4
    pwc_source: str = "low"
    # per-substitution switches; None follows ``variant``
    makdf: Optional[bool] = None
    rcfpn: Optional[bool] = None
    sc_detect: Optional[bool] = None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.input_size = tuple(int(s) for s in self.input_size)

    def _flag(self, value):
        return (self.variant == "mrs") if value is None else bool(value)

    @property
    def use_makdf(self) -> bool:
        return self._flag(self.makdf)

    @property
    def use_rcfpn(self) -> bool:
        return self._flag(self.rcfpn)

    @property
    def use_sc_detect(self) -> bool:
        return self._flag(self.sc_detect)

    def problems(self) -> list:
        out = []
        if self.variant not in ("mrs", "baseline"):
            out.append(f"variant must be 'mrs' or 'baseline', got {self.variant!r}")
        if len(self.widths) != 4:
            out.append(f"widths must have 4 entries, got {len(self.widths)}")
        for i, w in enumerate(self.widths):
            if w <= 0 or w % 12:
                out.append(f"widths[{i}]={w} is not a positive multiple of 12")
        if self.depth < 1:
            out.append(f"depth must be >= 1, got {self.depth}")
        if self.num_classes < 1:
            out.append(f"num_classes must be >= 1, got {self.num_classes}")
        if len(self.input_size) != 2 or any(s <= 0 or s % 32 for s in self.input_size):
            out.append(f"input_size {self.input_size} must be two positive multiples of 32")
        if not 0.0 <= self.gate_threshold < 1.0:
            out.append(f"gate_threshold {self.gate_threshold} outside [0, 1)")
        if self.pwc_source not in ("low", "up"):
            out.append(f"pwc_source must be 'low' or 'up', got {self.pwc_source!r}")
        if self.use_sc_detect and len(self.widths) == 4:
            cru = CRUConfig(pwc_source=self.pwc_source if self.pwc_source in ("low", "up") else "low")
            for i, w in enumerate(self.widths[1:], start=1):
                try:
                    cru.widths(w)
                except ValueError as e:
                    out.append(f"widths[{i}]={w}: {e}")
        return out

    def validate(self) -> "ModelConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def to_json(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown config field {k!r}" for k in unknown])
        return cls(**d)


class Backbone(Module):
    """stem s2 -> conv s2 -> C3k2 -> conv s2 -> C3k2 (P3) -> conv s2 -> C3k2 (P4)
    -> conv s2 -> C3k2 -> SPPF (P5)."""

    def __init__(self, widths: tuple, n: int, makdf: bool):
        w1, w2, w3, w4 = widths
        self.stem = ConvBlock(3, w1 // 2, 3, 2)
        self.down1 = ConvBlock(w1 // 2, w1, 3, 2)
        self.stage1 = C3k2(w1, w1, n, makdf)
        self.down2 = ConvBlock(w1, w2, 3, 2)
        self.stage2 = C3k2(w2, w2, n, makdf)
        self.down3 = ConvBlock(w2, w3, 3, 2)
        self.stage3 = C3k2(w3, w3, n, makdf)
        self.down4 = ConvBlock(w3, w4, 3, 2)
        self.stage4 = C3k2(w4, w4, n, makdf)
        self.sppf = SPPF(w4, w4)

    def forward(self, x: Tensor) -> tuple:
        x = self.stage1(self.down1(self.stem(x)))
        p3 = self.stage2(self.down2(x))
        p4 = self.stage3(self.down3(p3))
        p5 = self.sppf(self.stage4(self.down4(p4)))
        return p3, p4, p5

    def trace(self, tracer, labels):
        x = self.stage1.trace(tracer, self.down1.trace(tracer, self.stem.trace(tracer, labels)))
        p3 = self.stage2.trace(tracer, self.down2.trace(tracer, x))
        p4 = self.stage3.trace(tracer, self.down3.trace(tracer, p3))
        p5 = self.sppf.trace(tracer, self.stage4.trace(tracer, self.down4.trace(tracer, p4)))
        return p3, p4, p5


class DetectorModel(Module):
    """Backbone -> neck -> head; forward returns [(box_map, cls_map)] per level."""

    strides = (8, 16, 32)

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.config = cfg
        widths = cfg.widths
        pyramid = widths[1:]
        self.backbone = Backbone(widths, cfg.depth, cfg.use_makdf)
        if cfg.use_rcfpn:
            self.neck = RCFPN(pyramid, pyramid, cfg.depth, makdf=True)
        else:
            self.neck = ConcatFPN(pyramid, pyramid, cfg.depth, makdf=False)
        self.head = DetectHead(pyramid, cfg.num_classes, scconv=cfg.use_sc_detect,
                               sru=SRUConfig(cfg.gate_threshold),
                               cru=CRUConfig(pwc_source=cfg.pwc_source))

    def forward(self, x: Tensor) -> list:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (n, 3, h, w) input, got {x.shape}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ValueError(f"input spatial size {x.shape[2:]} must be divisible by 32")
        return self.head(*self.neck(*self.backbone(x)))

    def trace(self, tracer, labels):
        self.head.trace(tracer, *self.neck.trace(tracer, *self.backbone.trace(tracer, labels)))


def build(cfg: ModelConfig, seed: int = 0) -> DetectorModel:
    """Construct and deterministically initialize a model."""
    return DetectorModel(cfg).init(seed)


# ---------------------------------------------------------------------------
# cost accounting

@dataclass
class LayerCost:
    name: str
    type: str
    out_shape: Optional[tuple]
    params: int
    flops: int


@dataclass
class CostReport:
    layers: list = field(default_factory=list)
    input_size: Optional[tuple] = None

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def total_flops(self) -> int:
        return sum(l.flops for l in self.layers)

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    def to_json(self) -> dict:
        return {
            "flops_convention": FLOPS_CONVENTION,
            "input_size": list(self.input_size) if self.input_size else None,
            "layers": [
                {"name": l.name, "type": l.type,
                 "out_shape": list(l.out_shape) if l.out_shape else None,
                 "params": l.params, "flops": l.flops}
                for l in self.layers
            ],
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "gflops": self.gflops,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CostReport":
        layers = [LayerCost(r["name"], r["type"],
                            tuple(r["out_shape"]) if r["out_shape"] else None,
                            r["params"], r["flops"]) for r in d["layers"]]
        return cls(layers, tuple(d["input_size"]) if d["input_size"] else None)

    def to_text(self) -> str:
        lines = [f"# FLOPs: {FLOPS_CONVENTION}",
                 f"{'layer':<44} {'type':<12} {'out shape':<20} {'params':>10} {'FLOPs':>14}"]
        for l in self.layers:
            shape = "x".join(map(str, l.out_shape)) if l.out_shape else "-"
            lines.append(f"{l.name:<44} {l.type:<12} {shape:<20} {l.params:>10} {l.flops:>14}")
        lines.append(f"{'total':<44} {'':<12} {'':<20} {self.total_params:>10} {self.total_flops:>14}")
        lines.append(f"params: {self.total_params}  FLOPs: {self.total_flops}  GFLOPs: {self.gflops:.4f}")
        return "\n".join(lines)


def count_params(model: Module) -> CostReport:
    rows = [LayerCost(name or "<root>", type(m).__name__, None,
                      sum(p.size for p in m.own_parameters()), 0)
            for name, m in model.named_modules()]
    return CostReport([r for r in rows if r.params])


def count_flops(model: Module, input_size=None, batch: int = 1) -> CostReport:
    """Profile one forward on a zero input; rows are modules that own params or ops."""
    if input_size is None:
        input_size = model.config.input_size
    h, w = input_size
    x = Tensor(np.zeros((batch, 3, h, w)))
    with no_grad(), profiling(model) as prof:
        model(x)
    rows = []
    for name, m in model.named_modules():
        key = name
        params = sum(p.size for p in m.own_parameters())
        flops = prof.flops.get(key, 0)
        if params or flops:
            rows.append(LayerCost(name or "<root>", type(m).__name__, prof.out_shapes.get(key),
                                  params, flops))
    return CostReport(rows, (h, w))


def summarize(model: Module, input_size=None, as_json: bool = False):
    report = count_flops(model, input_size)
    return json.dumps(report.to_json(), indent=2) if as_json else report.to_text()
