"""Dense arrays with reverse-mode gradients.

A deliberately small engine: every op records its parents and a closure that
maps the output gradient back onto the inputs. Only the ops the vision graph
and the prompt modules need are provided; broadcasting is limited to the
elementwise ops.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A computation produced NaN or inf; ``op`` names the first offender."""

    def __init__(self, message: str, op: str | None = None):
        super().__init__(message)
        self.op = op


class Tensor:
    """Real-valued array with optional gradient tracking.

    ``data`` is a numpy array (float64 unless built otherwise). ``grad`` is
    ``None`` until a backward pass reaches the tensor, then an array of the
    same shape. Tensors are treated as immutable; only ``grad`` accumulates.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=np.float64):
        self.data = np.array(data, dtype=dtype, copy=True) if not isinstance(data, np.ndarray) \
            else data.astype(dtype, copy=False)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # ---------------------------------------------------------------- autograd
    def backward(self, grad=None):
        """Propagate gradients from this tensor to every reachable leaf.

        Without ``grad`` the tensor must hold a single value (a scalar loss).
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _tracks(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)


def _raise_item(t):
    raise ShapeError(f"item() needs a single value, got shape {t.shape}")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen and _tracks(p):
                stack.append((p, False))
    return order


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if any(_tracks(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise
def _is_scalar(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def add(a, b) -> Tensor:
    if _is_scalar(b):
        return _make(a.data + b, "add", (a,), lambda g: (g,))
    a, b = _wrap(a), _wrap(b)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return _make(a.data - b, "sub", (a,), lambda g: (g,))
    a, b = _wrap(a), _wrap(b)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return _make(a.data * b, "mul", (a,), lambda g: (g * b,))
    a, b = _wrap(a), _wrap(b)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU: ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    z = x.data
    t = np.tanh(GELU_C * (z + 0.044715 * (z * z * z)))
    out = 0.5 * z * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * z * z)
        return (g * (0.5 * (1.0 + t) + 0.5 * z * dt),)

    return _make(out, "gelu", (x,), backward)


# ------------------------------------------------------------------ algebra
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``.

    ``b`` is a 2-D matrix ``[k, n]``; ``a`` is ``[..., k]`` (a vector, a
    matrix, or a batch of matrices sharing ``b``).
    """
    a, b = _wrap(a), _wrap(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    a2 = a.data.reshape(-1, a.shape[-1])
    out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, b.shape[1])
        ga = (g2 @ b.data.T).reshape(a.shape)
        gb = a2.T @ g2
        return ga, gb

    return _make(out, "matmul", (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")
    return _make(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(np.broadcast_to(a.data, shape).copy(), "broadcast_to", (a,),
                 lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return _make(out, "concat", tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return _make(out, "stack", tensors, backward)


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), "take", (a,), backward)


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows: ``x[..., n, d]`` with ``index[..., m, k]`` -> ``[..., m, k, d]``.

    Leading (batch) dimensions of ``x`` and ``index`` must agree.
    """
    index = np.asarray(index, dtype=np.intp)
    lead = x.shape[:-2]
    if index.shape[:-2] != lead:
        raise ShapeError(f"gather: batch dims {index.shape[:-2]} do not match {lead}")
    n, d = x.shape[-2], x.shape[-1]
    batches = int(np.prod(lead)) if lead else 1
    offsets = (np.arange(batches) * n).reshape((batches,) + (1,) * 2)
    flat = (index.reshape((batches,) + index.shape[-2:]) + offsets).reshape(-1)
    x2 = x.data.reshape(batches * n, d)
    out = x2[flat].reshape(index.shape + (d,))

    def backward(g):
        scatter = sparse.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))),
                                    shape=(batches * n, flat.size))
        return ((scatter @ g.reshape(flat.size, d)).reshape(x.shape),)

    return _make(out, "gather", (x,), backward)


def _flat_index(x: Tensor, index: np.ndarray):
    index = np.asarray(index, dtype=np.intp)
    lead = x.shape[:-2]
    if index.shape[:-2] != lead:
        raise ShapeError(f"neighbor index batch dims {index.shape[:-2]} do not match {lead}")
    n = x.shape[-2]
    batches = int(np.prod(lead)) if lead else 1
    offsets = (np.arange(batches) * n).reshape(batches, 1, 1)
    flat = index.reshape((batches,) + index.shape[-2:]) + offsets
    return flat.reshape(-1, index.shape[-1]), batches * n


def neighbor_max(x: Tensor, index: np.ndarray) -> Tensor:
    """``max_j x[index[..., i, j]]`` for every row ``i`` without materializing the stack.

    Equivalent to ``max(gather(x, index), axis=-2)`` including the
    lowest-slot tie-break. ``index`` needs at least one column.
    """
    flat, rows = _flat_index(x, index)
    if flat.shape[1] == 0:
        raise ShapeError("neighbor_max needs at least one neighbor per node")
    d = x.shape[-1]
    x2 = x.data.reshape(rows, d)
    out = x2[flat[:, 0]].copy()
    winner = np.repeat(flat[:, :1], d, axis=1)
    for j in range(1, flat.shape[1]):
        cand = x2[flat[:, j]]
        better = cand > out
        np.copyto(out, cand, where=better)
        np.copyto(winner, flat[:, j:j + 1], where=better)

    def backward(g):
        cols = np.arange(d)
        full = np.bincount((winner * d + cols).reshape(-1), weights=g.reshape(-1), minlength=rows * d)
        return (full.reshape(x.shape).astype(g.dtype, copy=False),)

    return _make(out.reshape(index.shape[:-1] + (d,)), "neighbor_max", (x,), backward)


def neighbor_mean(x: Tensor, index: np.ndarray) -> Tensor:
    """``mean_j x[index[..., i, j]]`` as a sparse averaging product."""
    flat, rows = _flat_index(x, index)
    m, k = flat.shape
    d = x.shape[-1]
    if k == 0:
        raise ShapeError("neighbor_mean needs at least one neighbor per node")
    A = sparse.csr_matrix((np.full(m * k, 1.0 / k, dtype=x.data.dtype), (np.repeat(np.arange(m), k), flat.reshape(-1))),
                          shape=(m, rows))
    out = (A @ x.data.reshape(rows, d)).reshape(index.shape[:-1] + (d,))
    return _make(out, "neighbor_mean", (x,), lambda g: ((A.T @ g.reshape(m, d)).reshape(x.shape),))


# --------------------------------------------------------------- reductions
def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), "sum", (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def max(a: Tensor, axis: int = 0) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    axis = axis % a.ndim
    size = a.shape[axis]
    if size == 0:
        raise ShapeError(f"max over an empty axis {axis} of shape {a.shape}")
    # running comparison over the (short) reduction axis; strict '>' keeps the lowest index on ties
    slices = [np.take(a.data, j, axis=axis) for j in range(size)]
    out = slices[0].copy()
    arg = np.zeros(out.shape, dtype=np.intp)
    for j in range(1, size):
        better = slices[j] > out
        np.copyto(out, slices[j], where=better)
        arg[better] = j

    def backward(g):
        return (np.stack([np.where(arg == j, g, 0.0) for j in range(size)], axis=axis),)

    return _make(out, "max", (a,), backward)


def rowwise_max(stack_: Tensor) -> Tensor:
    """Componentwise maximum over the rows of a ``[k, d]`` stack (``k >= 1``)."""
    if stack_.ndim != 2:
        raise ShapeError(f"rowwise_max expects a [k, d] matrix, got {stack_.shape}")
    if stack_.shape[0] == 0:
        raise ShapeError("rowwise_max of an empty stack; substitute the zero vector upstream")
    return max(stack_, axis=0)


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, "log_softmax", (logits,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``[batch, C]`` (or ``[C]``) logits."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if logits.ndim == 1:
        logits = reshape(logits, (1, -1))
    logp = log_softmax(logits)
    picked = take(logp, (np.arange(len(labels)), labels))
    return mul(sum(picked), -1.0 / len(labels))


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), dtype=dtype)


def parameters(tensors: Iterable[Tensor]) -> list[Tensor]:
    """Mark tensors as trainable leaves and return them as a list."""
    out = []
    for t in tensors:
        t.requires_grad = True
        out.append(t)
    return out


def first_nonfinite(root: Tensor) -> Tensor | None:
    """Earliest node (in evaluation order) whose data is not finite."""
    for node in _topological_order_all(root):
        if not np.all(np.isfinite(node.data)):
            return node
    return None


def _topological_order_all(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order
