"""Central finite differences and an analytic-vs-numeric gradient harness."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .head import SRU, frozen_gates
from .nn import Module
from .rng import SplitMix64
from .tensor import Tensor, backward, no_grad

ABS_FLOOR = 1e-10


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-4,
                     indices: Sequence[int] = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    Returns a full-shape array; with ``indices`` (flat positions) only those
    entries are estimated and the rest are left at zero.  ``x.data`` is
    restored afterwards.
    """
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.size)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if diff <= ABS_FLOOR:
        return 0.0
    return diff / scale


@dataclass
class TensorCheck:
    name: str
    n_checked: int
    rel_error: float


@dataclass
class GradcheckResult:
    checks: list = field(default_factory=list)
    tol: float = 1e-4

    @property
    def max_error(self) -> float:
        return max((c.rel_error for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return all(c.rel_error <= self.tol for c in self.checks)


def _flatten_outputs(out) -> list:
    if isinstance(out, Tensor):
        return [out]
    flat = []
    for o in out:
        flat.extend(_flatten_outputs(o))
    return flat


def gradcheck(module: Module, inputs: Sequence[Tensor], seed: int = 0, tol: float = 1e-4,
              h: float = 1e-4, coords_per_tensor: int = 3, max_param_tensors: int = None
              ) -> GradcheckResult:
    """Compare backprop against central differences on sampled coordinates.

    The objective is sum_i <R_i, out_i> with fixed random R_i.  SRU gates are
    frozen at the mask of the first forward.  Every input tensor is checked;
    parameter tensors are all checked unless ``max_param_tensors`` caps them
    (an evenly spaced subset is then used).
    """
    rng = SplitMix64(seed ^ 0x5EED)
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    params = list(module.named_parameters())
    if max_param_tensors is not None and len(params) > max_param_tensors:
        pick = np.linspace(0, len(params) - 1, max_param_tensors).round().astype(int)
        params = [params[i] for i in sorted(set(pick))]

    with frozen_gates(module):
        module.zero_grad()
        outs = _flatten_outputs(module(*inputs))
        seeds = [rng.normal(o.shape) for o in outs]
        for o, s in zip(outs, seeds):
            backward(o, s)

        def objective(_):
            with no_grad():
                res = _flatten_outputs(module(*inputs))
            return sum(float(np.sum(r.data * s)) for r, s in zip(res, seeds))

        result = GradcheckResult(tol=tol)
        targets = [(f"input{i}", t) for i, t in enumerate(inputs)] + params
        for name, t in targets:
            k = min(coords_per_tensor, t.size)
            idx = sorted(set(int(v) for v in (rng.random(k) * t.size).astype(int)))
            num = finite_diff_grad(objective, t, h, idx).reshape(-1)[idx]
            ana = (np.zeros(t.size) if t.grad is None else t.grad.reshape(-1))[idx]
            result.checks.append(TensorCheck(name, len(idx), relative_error(ana, num)))
    return result


def randomize(module: Module, seed: int) -> Module:
    """Fill parameters with seeded random values (positive for norm scales)."""
    rng = SplitMix64(seed)
    srus = {id(m.gamma) for m in module.modules() if isinstance(m, SRU)}
    for _, p in module.named_parameters():
        if id(p) in srus:
            p.data = rng.uniform(0.2, 3.0, p.shape)
        elif p.init == "ones":
            p.data = rng.uniform(0.5, 1.5, p.shape)
        else:
            scale = 1.0 / np.sqrt(max(p.fan_in, 1))
            p.data = rng.normal(p.shape) * scale
    return module


def random_input(shape, seed: int) -> Tensor:
    return Tensor(SplitMix64(seed).normal(shape))


# ---------------------------------------------------------------------------
# named cases: (module factory, input shapes)

def _cases() -> dict:
    from .blocks import AKDC, MAKDF, C3k2
    from .head import CRU, DetectHead, SRUConfig
    from .model import ModelConfig, DetectorModel
    from .neck import RAU, SBA, RCFPN

    return {
        "akdc": (lambda: AKDC(12, 3), [(2, 12, 8, 8)]),
        "makdf": (lambda: MAKDF(12), [(2, 12, 8, 8)]),
        "c3k2": (lambda: C3k2(24, 24, 1, makdf=True), [(2, 24, 8, 8)]),
        "rau": (lambda: RAU(12, 24, 12), [(2, 12, 8, 8), (2, 24, 4, 4)]),
        "sba": (lambda: SBA(24, 12, 12, 12), [(2, 24, 4, 4), (2, 12, 8, 8)]),
        "sru": (lambda: SRU(12, SRUConfig(0.4)), [(2, 12, 8, 8)]),
        "cru": (lambda: CRU(24), [(2, 24, 8, 8)]),
        "head": (lambda: DetectHead((24, 24, 48), 3, scconv=True),
                 [(2, 24, 8, 8), (2, 24, 4, 4), (2, 48, 2, 2)]),
        "rcfpn": (lambda: RCFPN((24, 24, 48), (24, 24, 48)),
                  [(2, 24, 8, 8), (2, 24, 4, 4), (2, 48, 2, 2)]),
        "full": (lambda: DetectorModel(ModelConfig(widths=(12, 24, 24, 48), num_classes=3,
                                                   input_size=(32, 32))),
                 [(2, 3, 32, 32)]),
    }


BLOCKS = ("akdc", "makdf", "c3k2", "rau", "sba", "sru", "cru", "head", "rcfpn", "full")


def check_block(name: str, seed: int = 1, tol: float = 1e-4) -> GradcheckResult:
    """Gradient check of a named block on random parameters and inputs."""
    cases = _cases()
    if name not in cases:
        raise ValueError(f"unknown block {name!r}; choose from {', '.join(BLOCKS)}")
    factory, shapes = cases[name]
    module = randomize(factory(), seed)
    inputs = [random_input(s, seed * 1000 + i) for i, s in enumerate(shapes)]
    cap = 24 if name in ("full", "rcfpn") else None
    coords = 2 if name == "full" else 3
    return gradcheck(module, inputs, seed=seed, tol=tol, coords_per_tensor=coords,
                     max_param_tensors=cap)
