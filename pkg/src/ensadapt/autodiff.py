"""Minimal reverse-mode tape over float64 numpy arrays.

Only the handful of primitives the training objective needs: elementwise
arithmetic with broadcasting, matmul, reductions, exp/log/sqrt, column
slicing and concatenation. Gradients are plain numpy arrays accumulated on
the tape nodes by backward().
"""
from __future__ import annotations

import numpy as np

from . import backend
from .errors import NumericalError


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, name=""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in parents
        )
        self.parents = parents if self.requires_grad else ()
        self.backward_fn = backward_fn if self.requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, wrap(other))

    def __radd__(self, other):
        return add(wrap(other), self)

    def __sub__(self, other):
        return sub(self, wrap(other))

    def __rsub__(self, other):
        return sub(wrap(other), self)

    def __mul__(self, other):
        return mul(self, wrap(other))

    def __rmul__(self, other):
        return mul(wrap(other), self)

    def __truediv__(self, other):
        return div(self, wrap(other))

    def __rtruediv__(self, other):
        return div(wrap(other), self)

    def __neg__(self):
        return mul(self, wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, wrap(other))

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, grad={self.requires_grad}, name={self.name!r})"


def wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(value, name="") -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value + b.value, parents=(a, b))

    def bw(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    out.backward_fn = bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value - b.value, parents=(a, b))

    def bw(g):
        return _unbroadcast(g, a.value.shape), -_unbroadcast(g, b.value.shape)

    out.backward_fn = bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value * b.value, parents=(a, b))

    def bw(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    out.backward_fn = bw
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value / b.value, parents=(a, b))

    def bw(g):
        return (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        )

    out.backward_fn = bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(backend.matmul_kernel(a.value, b.value), parents=(a, b))

    def bw(g):
        ga = backend.matmul_kernel(g, np.ascontiguousarray(b.value.T))
        gb = backend.matmul_kernel(np.ascontiguousarray(a.value.T), g)
        return ga, gb

    out.backward_fn = bw
    return out


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.value.sum(axis=axis, keepdims=keepdims), parents=(a,))

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.value.shape).copy(),)

    out.backward_fn = bw
    return out


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.value.size if axis is None else a.value.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), wrap(1.0 / count))


def exp(a: Tensor) -> Tensor:
    val = np.exp(a.value)
    out = Tensor(val, parents=(a,))
    out.backward_fn = lambda g: (g * val,)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.value), parents=(a,))
    out.backward_fn = lambda g: (g / a.value,)
    return out


def sqrt(a: Tensor) -> Tensor:
    val = np.sqrt(a.value)
    out = Tensor(val, parents=(a,))
    out.backward_fn = lambda g: (g * 0.5 / val,)
    return out


def clip_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where a > lo."""
    mask = a.value > lo
    out = Tensor(np.where(mask, a.value, lo), parents=(a,))
    out.backward_fn = lambda g: (g * mask,)
    return out


def slice_cols(a: Tensor, j0: int, j1: int) -> Tensor:
    out = Tensor(a.value[:, j0:j1], parents=(a,))

    def bw(g):
        full = np.zeros_like(a.value)
        full[:, j0:j1] = g
        return (full,)

    out.backward_fn = bw
    return out


def concat_cols(tensors) -> Tensor:
    tensors = list(tensors)
    widths = [t.value.shape[1] for t in tensors]
    out = Tensor(np.concatenate([t.value for t in tensors], axis=1), parents=tuple(tensors))

    def bw(g):
        grads = []
        j = 0
        for w in widths:
            grads.append(g[:, j : j + w])
            j += w
        return tuple(grads)

    out.backward_fn = bw
    return out


def transpose(a: Tensor) -> Tensor:
    out = Tensor(np.ascontiguousarray(a.value.T), parents=(a,))
    out.backward_fn = lambda g: (np.ascontiguousarray(g.T),)
    return out


def softmax_rows(a: Tensor) -> Tensor:
    """Row softmax; the max shift is a constant (softmax is shift-invariant)."""
    shift = a.value.max(axis=1, keepdims=True)
    e = exp(sub(a, wrap(shift)))
    return div(e, tsum(e, axis=1, keepdims=True))


def row_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner product; returns a column (B, 1)."""
    return tsum(mul(a, b), axis=1, keepdims=True)


def row_norm(a: Tensor) -> Tensor:
    return sqrt(tsum(mul(a, a), axis=1, keepdims=True))


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into .grad of every tape node."""
    if loss.value.size != 1:
        raise NumericalError("backward expects a scalar loss")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    for node in topo:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        if node.grad is None or node.backward_fn is None:
            continue
        if not np.all(np.isfinite(node.grad)):
            raise NumericalError(f"non-finite gradient at node {node.name or 'unnamed'}")
        for parent, g in zip(node.parents, node.backward_fn(node.grad)):
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad = parent.grad + g
