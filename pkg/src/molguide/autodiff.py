"""A small tensor-level reverse-mode differentiation engine on numpy arrays.

Only the operations the equivariant network needs are provided. Every
function in this module also accepts plain ``np.ndarray`` inputs and then
returns plain arrays, so inference can run the same code without building a
graph.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence, Tuple

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to the reflected Tensor method

    def __init__(self, data, parents: Tuple["Tensor", ...] = (), backward: Optional[Callable] = None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    node.grad = None  # free intermediate buffers

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return mul(other, reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, w):
        return matmul(self, w)

    def __rmatmul__(self, a):
        return matmul(a, self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _is_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b):
    if not _is_tensor(a, b):
        return np.add(a, b)
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return Tensor(a.data + b.data, (a, b), backward)


def neg(a):
    if not _is_tensor(a):
        return np.negative(a)

    def backward(g):
        _accumulate(a, -g)

    return Tensor(-a.data, (a,), backward)


def mul(a, b):
    if not _is_tensor(a, b):
        return np.multiply(a, b)
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return Tensor(a.data * b.data, (a, b), backward)


def reciprocal(a):
    if not _is_tensor(a):
        return 1.0 / np.asarray(a, dtype=np.float64)
    out = 1.0 / a.data

    def backward(g):
        _accumulate(a, -g * out * out)

    return Tensor(out, (a,), backward)


def power(a, p: float):
    if not _is_tensor(a):
        return np.power(a, p)

    def backward(g):
        _accumulate(a, g * p * a.data ** (p - 1))

    return Tensor(a.data**p, (a,), backward)


def sqrt(a):
    if not _is_tensor(a):
        return np.sqrt(a)
    out = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * 0.5 / out)

    return Tensor(out, (a,), backward)


def _sigmoid(a):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def silu(a):
    """x * sigmoid(x)."""
    if not _is_tensor(a):
        return a * _sigmoid(a)
    sig = _sigmoid(a.data)
    out = a.data * sig

    def backward(g):
        _accumulate(a, g * (sig + out * (1.0 - sig)))

    return Tensor(out, (a,), backward)


def matmul(a, w):
    """``a @ w`` where ``w`` is 2-D and ``a`` has any number of leading axes."""
    if not _is_tensor(a, w):
        return np.matmul(a, w)
    a, w = _as_tensor(a), _as_tensor(w)
    if w.ndim != 2:
        raise ValueError("matmul supports only a 2-D right operand")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ w.data.T)
        if w.requires_grad:
            _accumulate(w, a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]))

    return Tensor(a.data @ w.data, (a, w), backward)


def sum_(a, axis=None, keepdims=False):
    if not _is_tensor(a):
        return np.sum(a, axis=axis, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, shape))

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    data = a.data if isinstance(a, Tensor) else np.asarray(a)
    if axis is None:
        n = data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([data.shape[ax] for ax in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def unsqueeze(a, axis: int):
    if not _is_tensor(a):
        return np.expand_dims(a, axis)
    shape = a.shape

    def backward(g):
        _accumulate(a, g.reshape(shape))

    return Tensor(np.expand_dims(a.data, axis), (a,), backward)


def concat(xs: Sequence, axis: int = -1):
    if not _is_tensor(*xs):
        return np.concatenate(xs, axis=axis)
    xs = [_as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        for x, part in zip(xs, np.split(g, sizes, axis=axis)):
            _accumulate(x, part)

    return Tensor(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), backward)


def value(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)
