"""Module tree, convolution layers and deterministic initialization."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .profiler import current as current_profiler
from .rng import SplitMix64
from .tensor import Parameter, Tensor


class Module:
    """Base class for layers and blocks.

    Children and parameters are discovered from instance attributes in
    assignment order (lists of modules are walked element-wise), which fixes
    the dotted parameter names and the initialization order.
    """

    def __call__(self, *args, **kwargs):
        prof = current_profiler()
        if prof is None:
            return self.forward(*args, **kwargs)
        name = prof.enter(self)
        out = None
        try:
            out = self.forward(*args, **kwargs)
            return out
        finally:
            prof.exit(name, out)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def trace(self, tracer, *labels):
        """Propagate channel labels (see ``prune.channel``)."""
        raise NotImplementedError(f"{type(self).__name__} does not support channel tracing")

    def _items(self):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Module, Parameter)):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(
                    isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, value in self._items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            else:
                yield from value.named_parameters(name + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[tuple]:
        yield prefix.rstrip(".") or "", self
        for key, value in self._items():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{key}.")

    def modules(self) -> list:
        return [m for _, m in self.named_modules()]

    def own_parameters(self) -> list:
        return [v for _, v in self._items() if isinstance(v, Parameter)]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def init(self, seed: int = 0) -> "Module":
        init_parameters(self, SplitMix64(seed))
        return self

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict, strict_shapes: bool = False) -> None:
        """Replace parameter values; shapes may change unless ``strict_shapes``."""
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if strict_shapes and value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = np.ascontiguousarray(value)
            p.grad = None


def init_parameters(module: Module, rng: SplitMix64) -> None:
    for _, p in module.named_parameters():
        if p.init == "zeros":
            p.data = np.zeros_like(p.data)
        elif p.init == "ones":
            p.data = np.ones_like(p.data)
        else:
            bound = 1.0 / math.sqrt(max(p.fan_in, 1))
            # stored as float32-representable values so checkpoints round-trip exactly
            p.data = rng.uniform(-bound, bound, p.shape).astype(np.float32).astype(np.float64)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def trace(self, tracer, labels):
        for layer in self.layers:
            labels = layer.trace(tracer, labels)
        return labels


def _pair(v):
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v)


class Conv2d(Module):
    """Plain convolution.

    Channel counts are read from the weight shape, so a layer whose weight
    has been sliced by the channel pruner keeps working.  ``depthwise``
    layers keep ``groups == channels`` through such slicing.
    """

    def __init__(self, c_in: int, c_out: int, k=1, stride=1, padding=None, groups: int = 1,
                 bias: bool = True, init: str = "uniform", depthwise: bool = False,
                 protected: bool = False, pin_out: bool = False):
        kh, kw = _pair(k)
        if depthwise:
            if c_in != c_out:
                raise ValueError("depthwise conv needs c_in == c_out")
            groups = c_in
        if c_in % groups or c_out % groups:
            raise ValueError(f"groups={groups} must divide c_in={c_in} and c_out={c_out}")
        if padding is None:
            padding = ((kh - 1) // 2, (kw - 1) // 2)
        fan_in = (c_in // groups) * kh * kw
        self.weight = Parameter(np.zeros((c_out, c_in // groups, kh, kw)), init, fan_in)
        self.bias = Parameter(np.zeros(c_out), init, fan_in) if bias else None
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        self.depthwise = depthwise
        self._groups = groups
        # protected: never scored as an independent channel producer
        self.protected = protected
        # pin_out: output channels are part of the model interface
        self.pin_out = pin_out

    @property
    def groups(self) -> int:
        return self.weight.shape[0] if self.depthwise else self._groups

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> tuple:
        return self.weight.shape[2:]

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def trace(self, tracer, labels):
        return tracer.conv(self, labels)


class ConvBlock(Module):
    """Convolution with bias followed by SiLU."""

    def __init__(self, c_in: int, c_out: int, k=1, stride=1, groups: int = 1, **kw):
        self.conv = Conv2d(c_in, c_out, k, stride, groups=groups, bias=True, **kw)

    @property
    def in_channels(self) -> int:
        return self.conv.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels

    def forward(self, x: Tensor) -> Tensor:
        return ops.silu(self.conv(x))

    def trace(self, tracer, labels):
        return self.conv.trace(tracer, labels)
