"""A small define-by-run reverse-mode autodiff over numpy arrays.

Only the operations the LSTM language model needs are provided. Every op
returns a new :class:`Tensor`; when gradient recording is on and any input
requires a gradient, the result keeps references to its parents and a
closure mapping the output gradient to one gradient per parent.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_RECORDING = True


class ShapeMismatch(ValueError):
    pass


class InvalidTarget(ValueError):
    pass


class NotScalarLoss(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    global _RECORDING
    prev, _RECORDING = _RECORDING, False
    try:
        yield
    finally:
        _RECORDING = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _RECORDING and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias row matching a's last axis."""
    a, b = _wrap(a), _wrap(b)
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        axes = tuple(range(a.data.ndim - 1))
        return _result(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes)), "add_bias")
    raise ShapeMismatch(f"add: {a.shape} + {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {a.shape} * {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    a = _wrap(a)
    return _result(a.data * s, (a,), lambda g: (g * s,), "scale")


def dropout_apply(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant mask (broadcastable onto ``a``)."""
    a = _wrap(a)
    try:
        out = a.data * mask
    except ValueError:
        raise ShapeMismatch(f"dropout_apply: {a.shape} * mask {np.shape(mask)}") from None
    if out.shape != a.shape:
        raise ShapeMismatch(f"dropout_apply: mask {np.shape(mask)} widens {a.shape}")
    return _result(out, (a,), lambda g: (g * mask,), "dropout")


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    a = _wrap(a)
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeMismatch(f"embedding table must be 2-D, got {table.shape}")
    n_rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise IndexError(f"token id out of range [0, {n_rows})")

    def backward_fn(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _result(table.data[ids], (table,), backward_fn, "embedding")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"concat axis={axis}: {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(data, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=0)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing only; fancy indices with repeats are not supported."""
    a = _wrap(a)

    def backward_fn(g):
        grad = np.zeros_like(a.data)
        grad[idx] = g
        return (grad,)

    return _result(a.data[idx], (a,), backward_fn, "getitem")


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def tsum(a: Tensor) -> Tensor:
    a = _wrap(a)
    return _result(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    logits = _wrap(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise ShapeMismatch(f"softmax_cross_entropy: logits {logits.shape}, targets {targets.shape}")
    n, v = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise InvalidTarget(f"target id outside [0, {v})")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def backward_fn(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (grad * (g / n),)

    return _result(np.asarray(loss), (logits,), backward_fn, "softmax_xent")


def topological_order(loss: Tensor) -> list[Tensor]:
    """Nodes reachable from ``loss``, each after all of its parents."""
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node.parents if p.requires_grad and id(p) not in seen)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise NotScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences."""
    point.requires_grad = True
    point.grad = None
    backward(f(point))
    analytic = np.zeros_like(point.data) if point.grad is None else point.grad.copy()
    numeric = np.zeros_like(point.data)
    with no_grad():
        for idx in np.ndindex(point.shape):
            orig = point.data[idx]
            point.data[idx] = orig + eps
            up = float(f(point).data)
            point.data[idx] = orig - eps
            down = float(f(point).data)
            point.data[idx] = orig
            numeric[idx] = (up - down) / (2 * eps)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if point.data.size else 0.0
