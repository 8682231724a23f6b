"""A small reverse-mode differentiation engine over numpy arrays.

Only the operations needed by the fusion block and the alignment losses are
provided. Every op records a closure that maps the output gradient to its
parents' gradients; :meth:`Tensor.backward` walks the graph once in reverse
topological order.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateConfiguration

DEGENERACY_EIG = 1e-10


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self):
        return float(self.value)

    def backward(self, grad=None):
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value) if grad is None else np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def leaf(value) -> Tensor:
    """A differentiable input."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


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
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _make(value, parents, backward):
    parents = tuple(parents)
    req = any(p.requires_grad for p in parents)
    return Tensor(value, req, parents if req else (), backward if req else None)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.value + b.value, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.value - b.value, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return _make(a.value * b.value, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.value, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.value, b.shape))

    return _make(out, (a, b), bw)


def power(a, p: float):
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g * p * a.value ** (p - 1))

    return _make(a.value**p, (a,), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape))

    return _make(a.value @ b.value, (a, b), bw)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: _accumulate(a, g * out))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.value), (a,), lambda g: _accumulate(a, g / a.value))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: _accumulate(a, g * 0.5 / out))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.value)
    return _make(out, (a,), lambda g: _accumulate(a, g * out * (1.0 - out)))


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.value.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.value.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def swapaxes(a, i, j):
    a = as_tensor(a)
    return _make(np.swapaxes(a.value, i, j), (a,), lambda g: _accumulate(a, np.swapaxes(g, i, j)))


def broadcast_to(a, shape):
    a = as_tensor(a)
    return _make(np.broadcast_to(a.value, shape), (a,), lambda g: _accumulate(a, _unbroadcast(g, a.shape)))


def getitem(a, idx):
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _make(a.value[idx], (a,), bw)


def stack(items, axis=0):
    items = [as_tensor(t) for t in items]

    def bw(g):
        for i, t in enumerate(items):
            _accumulate(t, np.take(g, i, axis=axis))

    return _make(np.stack([t.value for t in items], axis=axis), items, bw)


def concat(items, axis=0):
    items = [as_tensor(t) for t in items]
    sizes = [t.shape[axis] for t in items]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(items, np.split(g, bounds, axis=axis)):
            _accumulate(t, part)

    return _make(np.concatenate([t.value for t in items], axis=axis), items, bw)


def logsumexp(a, axis=-1, keepdims=False):
    a = as_tensor(a)
    m = np.max(a.value, axis=axis, keepdims=True)
    s = np.log(np.sum(np.exp(a.value - m), axis=axis, keepdims=True)) + m
    out = s if keepdims else np.squeeze(s, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, g * np.exp(a.value - s))

    return _make(out, (a,), bw)


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.value - np.max(a.value, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(a, out * (g - np.sum(g * out, axis=axis, keepdims=True)))

    return _make(out, (a,), bw)


def normalize_rows(a, axis=-1):
    a = as_tensor(a)
    return a / sqrt(tsum(a * a, axis=axis, keepdims=True))


def sqrt_det(k, check=True):
    """sqrt(det K) over the trailing two axes of a stack of SPD matrices.

    The derivative is d sqrt(det K) / dK = (sqrt(det K) / 2) K^{-T}. When a
    gradient may be requested, every matrix must be safely positive definite
    (smallest eigenvalue above 1e-10) or DegenerateConfiguration is raised.
    """
    from .geometry import _det_psd_batch

    k = as_tensor(k)
    shape = k.shape
    flat = k.value.reshape(-1, shape[-2], shape[-1])
    vol = np.sqrt(_det_psd_batch(flat)).reshape(shape[:-2])
    if k.requires_grad and check:
        lo = np.linalg.eigvalsh(flat)[:, 0]
        if np.any(lo <= DEGENERACY_EIG):
            raise DegenerateConfiguration(
                f"kernel Gram smallest eigenvalue {lo.min():.3e} <= {DEGENERACY_EIG:g}"
            )

    def bw(g):
        inv = np.linalg.inv(k.value)
        _accumulate(k, (g * vol)[..., None, None] * 0.5 * np.swapaxes(inv, -1, -2))

    return _make(vol, (k,), bw)
