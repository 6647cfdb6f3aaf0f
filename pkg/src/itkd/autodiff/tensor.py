"""Dense float64 tensors with a reverse-mode gradient tape."""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of incompatible shape."""

    def __init__(self, primitive: str, message: str, shapes: Sequence[tuple] = ()):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        detail = f" (shapes: {', '.join(str(s) for s in self.shapes)})" if shapes else ""
        super().__init__(f"{primitive}: {message}{detail}")


_grad_enabled = True
# optional observer notified with (kind, pre-activation array) by kinked primitives
_kink_observer: Callable[[str, np.ndarray], None] | None = None


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def observe_kinks(callback: Callable[[str, np.ndarray], None]):
    global _kink_observer
    prev = _kink_observer
    _kink_observer = callback
    try:
        yield
    finally:
        _kink_observer = prev


def _notify_kink(kind: str, values: np.ndarray) -> None:
    if _kink_observer is not None:
        _kink_observer(kind, values)


class Tensor:
    """An n-dimensional float64 value that can carry a gradient trace.

    Only tensors created by primitives from at least one ``requires_grad``
    input record a backward closure.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar; the primitives live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, as_tensor(other, like=self))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, as_tensor(other, like=self))

    def __rsub__(self, other):
        from . import ops
        return ops.sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scalar_mul(self, float(other))
        return ops.mul(self, as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from . import ops
        return ops.scalar_mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, as_tensor(other))

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if np.isscalar(value) and like is not None:
        return Tensor(np.full(like.shape, float(value)))
    return Tensor(value)


def make_result(data: np.ndarray, parents: Iterable[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap a primitive's forward value and record it on the tape when needed."""
    parents = tuple(parents)
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves that already hold a gradient buffer are accumulated into;
    leaves without one get a fresh buffer.
    """
    if grad is None:
        if loss.size != 1:
            raise ShapeError("backward", "loss must be a scalar", [loss.shape])
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                node.grad = node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
