"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps a dense numpy array plus an optional gradient. Primitives
record their inputs and a backward closure on the output tensor; calling
``backward`` replays these closures in reverse topological order (which
equals reverse construction order because tensors are immutable once
created). Gradients accumulate additively until explicitly zeroed.

Every primitive checks its result for NaN/Inf and raises NumericError on
the first non-finite value, so numerical blow-ups surface at the op that
produced them rather than epochs later.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .errors import NumericError, ShapeMismatch, StateError

DEFAULT_DTYPE = np.float32
FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Probability floor used by log-based losses; clamping at this value is
# recorded as an event by callers, never raised as an error.
LOG_CLAMP = 1e-12


def check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {where}")


class Tensor:
    """Dense n-d array with optional gradient.

    ``data`` is always a float32 or float64 numpy array. ``grad``, when
    present, has the same shape and dtype as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in FLOAT_DTYPES:
                arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self, grad=None) -> None:
        """Propagate ``grad`` (default: ones for scalar outputs) to all leaves."""
        if grad is None:
            if self.data.size != 1:
                raise StateError("backward() without a gradient requires a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeMismatch(
                    f"output gradient shape {grad.shape} != output shape {self.data.shape}")

        order = self._topo_order()
        pending = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    def _topo_order(self) -> list["Tensor"]:
        # Iterative DFS; recursion would overflow on long tapes.
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
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; use mul + reciprocal scalars")
        return mul(self, _wrap(1.0 / float(other), self.dtype))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def __repr__(self):
        head = f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}"
        if self.requires_grad:
            head += ", requires_grad=True"
        if self.name:
            head += f", name={self.name!r}"
        return head + ")"


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents: Iterable[Tensor], backward: Callable, name: str) -> Tensor:
    """Assemble an op output, attaching the tape entry only when needed."""
    check_finite(data, name)
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise and reduction primitives -------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _make(out, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return _make(out, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return [(a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape))]

    return _make(out, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    return _make(out, (a, b), backward, "matmul")


def relu(x: Tensor) -> Tensor:
    # Subgradient at exactly 0 is 0.
    out = np.maximum(x.data, 0)

    def backward(g):
        return [(x, g * (out > 0))]

    return _make(out, (x,), backward, "relu")


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, alpha * x.data)

    def backward(g):
        return [(x, g * np.where(mask, 1.0, alpha).astype(x.dtype, copy=False))]

    return _make(out, (x,), backward, "leaky_relu")


def tabs(x: Tensor) -> Tensor:
    out = np.abs(x.data)
    sign = np.sign(x.data)

    def backward(g):
        return [(x, g * sign)]

    return _make(out, (x,), backward, "abs")


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def backward(g):
        return [(x, g / x.data)]

    return _make(out, (x,), backward, "log")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return [(x, g * out)]

    return _make(out, (x,), backward, "exp")


def sigmoid(x: Tensor) -> Tensor:
    # Stable two-sided formulation.
    out = np.where(x.data >= 0,
                   1.0 / (1.0 + np.exp(-np.abs(x.data))),
                   np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
    out = out.astype(x.dtype, copy=False)

    def backward(g):
        return [(x, g * out * (1 - out))]

    return _make(out, (x,), backward, "sigmoid")


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0, x.data).astype(x.dtype, copy=False)

    def backward(g):
        s = np.where(x.data >= 0,
                     1.0 / (1.0 + np.exp(-np.abs(x.data))),
                     np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
        return [(x, g * s.astype(x.dtype, copy=False))]

    return _make(out, (x,), backward, "softplus")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient flows only where the clamp is inactive."""
    mask = x.data > floor
    out = np.where(mask, x.data, floor).astype(x.dtype, copy=False)

    def backward(g):
        return [(x, g * mask)]

    return _make(out, (x,), backward, "clamp_min")


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [(x, np.broadcast_to(g, x.shape).astype(x.dtype, copy=False))]

    return _make(np.asarray(out), (x,), backward, "sum")


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else x.data.shape[axis]

    def backward(g):
        g = np.asarray(g) / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [(x, np.broadcast_to(g, x.shape).astype(x.dtype, copy=False))]

    return _make(np.asarray(out), (x,), backward, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return [(x, g.reshape(x.shape))]

    return _make(out, (x,), backward, "reshape")


def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeMismatch(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return [(x, out * (g - inner))]

    return _make(out, (x,), backward, "softmax")


def gather_class(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Select per-sample class slices: out[n, ...] = probs[n, labels[n], ...]."""
    labels = np.asarray(labels)
    n = probs.shape[0]
    if labels.shape != (n,):
        raise ShapeMismatch(f"labels shape {labels.shape} != ({n},)")
    idx = np.arange(n)
    out = probs.data[idx, labels]

    def backward(g):
        full = np.zeros_like(probs.data)
        full[idx, labels] = g
        return [(probs, full)]

    return _make(out, (probs,), backward, "gather_class")
