"""Dense float64 tensors with recorded reverse-mode gradients."""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable recording in the current context (thread / task local)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode.

    Feature maps are rank 4 (N, C, H, W) in row-major order; parameters may
    have any rank (conv weights are rank 4, biases and norm scales rank 1).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)


class Parameter(Tensor):
    """A trainable leaf tensor with an initialization rule.

    ``init`` is one of ``"uniform"`` (U(-b, b), b = 1/sqrt(fan_in)),
    ``"zeros"`` or ``"ones"``.
    """

    __slots__ = ("init", "fan_in")

    def __init__(self, data, init: str = "uniform", fan_in: int = 1):
        super().__init__(data, requires_grad=True)
        self.init = init
        self.fan_in = fan_in


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor],
                backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result, recording the backward closure when needed."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced by tensor op")
    out = Tensor(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor, seed_grad=None, inputs: Iterable[Tensor] = ()) -> None:
    """Propagate ``seed_grad`` from ``output`` to every recorded ancestor.

    Tensors listed in ``inputs`` that the output does not depend on end up
    with an all-zero gradient instead of ``None``.
    """
    seed = np.ones_like(output.data) if seed_grad is None else np.asarray(
        seed_grad.data if isinstance(seed_grad, Tensor) else seed_grad, dtype=np.float64)
    if seed.shape != output.shape:
        raise ShapeError(f"seed_grad shape {seed.shape} != output shape {output.shape}")
    for t in inputs:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    if not output.requires_grad:
        return
    order = _topo_order(output)
    # interior grads are scratch space: reset before propagating
    for node in order:
        if node._backward is not None:
            node.grad = None
    output.grad = seed.copy()
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
