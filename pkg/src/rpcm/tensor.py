"""Dense tensors with reverse-mode differentiation.

A `Tensor` wraps a float64 numpy array. Operations that involve at least one
tensor with ``requires_grad`` record a backward closure; `Tensor.backward`
walks the recorded graph in reverse topological order.

Backward rules are module-level functions looked up at call time, so a rule
can be swapped out (the verification suite relies on this to prove that a
broken rule is caught).
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DimMismatch, NonFinite

DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def check_finite(arr: np.ndarray, what: str = "tensor") -> None:
    if not np.isfinite(arr).all():
        raise NonFinite(f"{what} contains NaN or Inf")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True)
        check_finite(arr, name or "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this tensor into every upstream leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimMismatch("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=DTYPE))


_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current context (thread-local under threads)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def node(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Create an op output; records the graph only when a parent needs grads."""
    out = Tensor._wrap(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def _add_backward(g, sa, sb):
    return unbroadcast(g, sa), unbroadcast(g, sb)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return node(a.data + b.data, (a, b), lambda g: _add_backward(g, sa, sb))


def _sub_backward(g, sa, sb):
    return unbroadcast(g, sa), unbroadcast(-g, sb)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return node(a.data - b.data, (a, b), lambda g: _sub_backward(g, sa, sb))


def _mul_backward(g, a, b):
    return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return node(ad * bd, (a, b), lambda g: _mul_backward(g, ad, bd))


def _relu_backward(g, x):
    return (g * (x > 0),)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return node(np.maximum(xd, 0.0), (x,), lambda g: _relu_backward(g, xd))


def _sigmoid_backward(g, y):
    return (g * y * (1.0 - y),)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign to avoid exp overflow
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    return node(y, (x,), lambda g: _sigmoid_backward(g, y))


def _minimum_backward(g, take_a):
    return g * take_a, g * ~take_a


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum; ties route the gradient to ``a``."""
    if a.shape != b.shape:
        raise DimMismatch(f"minimum of {a.shape} and {b.shape}")
    take_a = a.data <= b.data
    return node(np.where(take_a, a.data, b.data), (a, b), lambda g: _minimum_backward(g, take_a))


def _reshape_backward(g, shape):
    return (g.reshape(shape),)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return node(x.data.reshape(shape), (x,), lambda g: _reshape_backward(g, old))


def _sum_backward(g, shape):
    return (np.broadcast_to(g, shape).copy(),)


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return node(np.asarray(x.data.sum()), (x,), lambda g: _sum_backward(g, shape))


def mean(x: Tensor) -> Tensor:
    return mul(tsum(x), 1.0 / x.data.size)


# ---------------------------------------------------------------- params


class ParamSet:
    """Named parameters with deterministic (sorted) iteration order."""

    def __init__(self, params: dict[str, Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        for name, t in (params or {}).items():
            self[name] = t

    def __setitem__(self, name: str, t: Tensor) -> None:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t.requires_grad = True
        t.name = name
        self._params[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._params[n]) for n in self.names()]

    def subset(self, prefix: str) -> "ParamSet":
        """View of the parameters under ``prefix.`` (same tensor objects)."""
        sub = ParamSet()
        for n, t in self.items():
            if n.startswith(prefix + "."):
                sub._params[n[len(prefix) + 1:]] = t
        return sub

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {
            n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in self.items()
        }

    def copy(self) -> "ParamSet":
        return ParamSet({n: Tensor(t.data) for n, t in self.items()})

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())
