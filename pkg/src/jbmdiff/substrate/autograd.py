"""Small reverse-mode autodiff over numpy arrays.

Only the operations the models need are supported. Sparse matrices enter as
constants (``spmm``); gradients never flow into them.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def item(self):
        return float(self.data)

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take_rows(self, index)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, c):
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def spmm(a: sp.csr_matrix, b):
    """Constant sparse ``a`` times differentiable dense ``b``."""
    b = as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"spmm shape mismatch: {a.shape} @ {b.shape}")
    at = a.T.tocsr()
    return _make(np.asarray(a @ b.data), (b,), lambda g: (np.asarray(at @ g),))


def sigmoid(a):
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def log_sigmoid(a):
    a = as_tensor(a)
    out = -np.logaddexp(0.0, -a.data)
    return _make(out, (a,), lambda g: (g * _sigmoid(-a.data),))


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a):
    a = as_tensor(a)
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a):
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def total(a):
    a = as_tensor(a)
    return _make(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a):
    a = as_tensor(a)
    n = a.data.size
    return _make(
        np.sum(a.data) / n, (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),)
    )


def row_sum(a):
    """Sum over the last axis of a 2-d tensor, keeping a column shape."""
    a = as_tensor(a)
    return _make(
        a.data.sum(axis=1, keepdims=True),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape).copy(),),
    )


def row_normalize(a, eps=1e-12):
    """L2-normalize rows."""
    a = as_tensor(a)
    norm = np.sqrt(np.sum(a.data * a.data, axis=1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = a.data / norm

    def backward(g):
        return ((g - y * np.sum(g * y, axis=1, keepdims=True)) / norm,)

    return _make(y, (a,), backward)


def take_rows(a, index):
    a = as_tensor(a)
    index = np.asarray(index)

    def backward(g):
        out = np.zeros_like(a.data, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), backward)


def concat_rows(parts):
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[0] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=0))

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward)


def concat_cols(parts):
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[1] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=1))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


def cross_entropy_diag(logits):
    """Mean over rows of ``-log softmax(logits)[i, i]``.

    Row i's positive sits on the diagonal; the rest of the row are negatives.
    """
    logits = as_tensor(logits)
    x = logits.data
    n = x.shape[0]
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -np.trace(logp) / n

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), np.arange(n)] -= 1.0
        return (g * p / n,)

    return _make(loss, (logits,), backward)


def transpose(a):
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,))
