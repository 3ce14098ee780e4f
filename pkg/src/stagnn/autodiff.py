"""Minimal reverse-mode automatic differentiation over numpy arrays.

Each op builds a new :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients. :func:`backward` walks the
recorded graph in reverse topological order.  Tensors whose inputs carry no
``requires_grad`` flag record nothing, so inference is free of tape overhead.
"""
from __future__ import annotations

import contextvars
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

_op_counter: contextvars.ContextVar[list | None] = contextvars.ContextVar("op_counter", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self.op or 'leaf'})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


def parameter(data) -> Tensor:
    return Tensor(np.array(data), requires_grad=True)


@contextmanager
def count_ops():
    """Count primitive op invocations inside the block.

    Yields a one-element list whose entry holds the running count.
    """
    box = [0]
    token = _op_counter.set(box)
    try:
        yield box
    finally:
        _op_counter.reset(token)


def _make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    box = _op_counter.get()
    if box is not None:
        box[0] += 1
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), bw, "relu")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype, copy=False)

    def bw(g):
        return (g * scale,)

    return _make(x.data * scale, (x,), bw, "leaky_relu")


def identity(x) -> Tensor:
    return as_tensor(x)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.T, (x,), lambda g: (g.T,), "transpose")


def spmm(m: sp.spmatrix, x) -> Tensor:
    """Product of a constant sparse matrix with a dense tensor."""
    x = as_tensor(x)
    mt = None

    def bw(g):
        nonlocal mt
        if mt is None:
            mt = m.T.tocsr()
        return (np.asarray(mt @ g),)

    return _make(np.asarray(m @ x.data), (x,), bw, "spmm")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def take(x, key) -> Tensor:
    """Basic (slice) indexing ``x[key]``."""
    x = as_tensor(x)

    def bw(g):
        out = np.zeros_like(x.data)
        out[key] = g
        return (out,)

    return _make(x.data[key], (x,), bw, "take")


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


# ---------------------------------------------------------------- graph ops


def gather(x, index: np.ndarray, scatter: sp.spmatrix | None = None) -> Tensor:
    """Row gather ``x[index]``.

    ``scatter`` may carry a precomputed ``(n_rows, len(index))`` 0/1 matrix used
    to route gradients back; otherwise it is built on demand.
    """
    x = as_tensor(x)
    n = x.shape[0]

    def bw(g):
        s = scatter
        if s is None:
            s = sp.csr_matrix(
                (np.ones(len(index), dtype=g.dtype), (index, np.arange(len(index)))),
                shape=(n, len(index)),
            )
        return (np.asarray(s @ g.reshape(len(index), -1)).reshape((n,) + g.shape[1:]),)

    return _make(x.data[index], (x,), bw, "gather")


def segment_sum(x, starts: np.ndarray, counts: np.ndarray, scatter: sp.spmatrix | None = None) -> Tensor:
    """Sum rows over contiguous, non-empty segments.

    ``scatter`` may carry the equivalent ``(n_segments, n_rows)`` 0/1 matrix;
    a sparse product is much faster than ``reduceat`` on wide rows.
    """
    x = as_tensor(x)

    def bw(g):
        return (np.repeat(g, counts, axis=0),)

    if scatter is not None:
        out = np.asarray(scatter @ x.data.reshape(x.shape[0], -1)).reshape((len(starts),) + x.shape[1:])
    else:
        out = np.add.reduceat(x.data, starts, axis=0)
    return _make(out, (x,), bw, "segment_sum")


def segment_softmax(e, starts: np.ndarray, counts: np.ndarray) -> Tensor:
    """Softmax of ``e`` (rows x columns) independently inside each row segment."""
    e = as_tensor(e)
    mx = np.repeat(np.maximum.reduceat(e.data, starts, axis=0), counts, axis=0)
    ex = np.exp(e.data - mx)
    den = np.repeat(np.add.reduceat(ex, starts, axis=0), counts, axis=0)
    alpha = ex / den

    def bw(g):
        inner = np.repeat(np.add.reduceat(g * alpha, starts, axis=0), counts, axis=0)
        return (alpha * (g - inner),)

    return _make(alpha, (e,), bw, "segment_softmax")


# ---------------------------------------------------------------- losses


def softmax_cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of integer ``labels``."""
    logits = as_tensor(logits)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return ((g * p / n).astype(logits.dtype, copy=False),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "softmax_cross_entropy")


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` with respect to each tensor in ``params``.

    Parameters the loss does not depend on receive zero gradients.
    """
    params = list(params)
    if not isinstance(loss, Tensor) or (loss._backward is None and not loss.requires_grad):
        raise RuntimeError("backward called before a forward pass was recorded")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return [
        grads[id(p)].astype(p.dtype, copy=False) if id(p) in grads else np.zeros_like(p.data)
        for p in params
    ]
