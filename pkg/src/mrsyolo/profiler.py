"""FLOP attribution for forward passes.

Ops report their cost through :func:`record_flops`; modules push themselves
on the active profiler's stack so the cost lands on the innermost module.
Convolutions count a multiply-accumulate as 2 FLOPs; every other
arithmetic op counts 1 FLOP per output element; pure data movement
(split, concat, reshape, resize) is free.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections import OrderedDict

_active = contextvars.ContextVar("profiler", default=None)


class Profiler:
    def __init__(self, root=None):
        self.names = {}
        if root is not None:
            self.names = {id(m): name for name, m in root.named_modules()}
        self.stack: list = []
        self.flops: "OrderedDict[str, int]" = OrderedDict()
        self.out_shapes: dict = {}
        self.types: dict = {}

    def enter(self, module) -> str:
        name = self.names.get(id(module), type(module).__name__)
        self.stack.append(name)
        self.flops.setdefault(name, 0)
        self.types[name] = type(module).__name__
        return name

    def exit(self, name: str, out) -> None:
        self.stack.pop()
        shape = getattr(out, "shape", None)
        if shape is not None:
            self.out_shapes[name] = tuple(shape)

    def add(self, n: int) -> None:
        key = self.stack[-1] if self.stack else "<root>"
        self.flops[key] = self.flops.get(key, 0) + int(n)


def current():
    return _active.get()


def record_flops(n: int) -> None:
    prof = _active.get()
    if prof is not None:
        prof.add(n)


@contextlib.contextmanager
def profiling(root=None):
    prof = Profiler(root)
    token = _active.set(prof)
    try:
        yield prof
    finally:
        _active.reset(token)
