"""Dense reverse-mode automatic differentiation on top of numpy.

Every operation builds a node on a dynamic tape; ``backward`` walks the tape
in reverse topological order and accumulates exact gradients.  Values are
64-bit floats throughout.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> loss = (w * w).sum()
    >>> backward(loss)
    >>> w.grad
    array([[2., 4.]])
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

Rule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array that records how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_rule")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._rule: Rule | None = None

    @classmethod
    def _from_op(cls, value: np.ndarray, parents: Sequence[Tensor], rule: Rule) -> Tensor:
        out = cls.__new__(cls)
        out.data = np.asarray(value, dtype=np.float64)
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._rule = rule
        else:
            out._parents = ()
            out._rule = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return Tensor._from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return Tensor._from_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return Tensor._from_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data
    return Tensor._from_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp(-|z|) never overflows
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return Tensor._from_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value; use log_softmax for log-probabilities")
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def hinge(a, c: float = 0.0) -> Tensor:
    """``max(0, a - c)`` elementwise."""
    a = as_tensor(a)
    z = a.data - c
    mask = z > 0
    return Tensor._from_op(np.where(mask, z, 0.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Linear algebra, reductions and indexing
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return Tensor._from_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(out, (a,), rule)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, index) -> Tensor:
    """Basic or integer-array indexing with scatter-add backward."""
    a = as_tensor(a)
    if isinstance(index, Tensor):
        raise ContractError("index with integer arrays, not tensors")

    def rule(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(a.data[index], (a,), rule)


def pick(a, labels) -> Tensor:
    """Row-wise gather ``a[i, labels[i]]`` of a [b, K] tensor."""
    a = as_tensor(a)
    labels = np.asarray(labels, dtype=np.int64)
    if a.ndim != 2 or labels.shape != (a.shape[0],):
        raise ShapeError(f"pick expects [b,K] values and [b] labels, got {a.shape}, {labels.shape}")
    return getitem(a, (np.arange(a.shape[0]), labels))


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[1] < 2:
        raise ShapeError(f"log_softmax expects [b,K] with K >= 2, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)
    return Tensor._from_op(
        out, (a,), lambda g: (g - probs * g.sum(axis=1, keepdims=True),)
    )


def softmax(a) -> Tensor:
    return exp(log_softmax(a))


# ---------------------------------------------------------------------------
# User-defined gradients and the backward pass
# ---------------------------------------------------------------------------


def custom_grad(forward: Callable[..., np.ndarray], backward_fn: Callable[..., Sequence]):
    """Wrap a numpy function with a hand-written vector-Jacobian product.

    ``forward(*values)`` receives the raw input arrays. ``backward_fn(g, out,
    *values)`` receives the upstream gradient, the forward output and the
    inputs, and returns one gradient (or ``None``) per input.
    """

    def op(*inputs) -> Tensor:
        tensors = [as_tensor(x) for x in inputs]
        values = [t.data for t in tensors]
        out = np.asarray(forward(*values), dtype=np.float64)

        def rule(g):
            grads = backward_fn(g, out, *values)
            if len(grads) != len(tensors):
                raise ContractError("custom backward must return one gradient per input")
            return grads

        return Tensor._from_op(out, tensors, rule)

    return op


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


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Back-propagate from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` receive ``.grad``. When ``params`` is
    given, their gradients are also returned in order; parameters the loss
    does not depend on get zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise ContractError("backward called on a non-finite loss")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None) if node._rule is not None else grads.get(id(node))
        if g is None:
            continue
        if node._rule is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

    if params is None:
        return None
    return [
        p.grad if p.grad is not None else np.zeros_like(p.data)
        for p in params
    ]


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Fresh gradients of ``loss`` w.r.t. ``params`` (previous ``.grad`` discarded)."""
    zero_grad(params)
    return backward(loss, params)
