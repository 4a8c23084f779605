"""Reverse-mode automatic differentiation over float64 numpy arrays.

A Tensor wraps an ndarray and records, while gradients are enabled, the
closure needed to push its output gradient back to its parents. The graph is
rebuilt on every forward pass; `backward()` on a scalar runs a topological
sweep and accumulates `.grad` arrays on every tensor that requires them.

Everything runs in float64: the finite-difference harness needs the widest
precision numpy's BLAS path supports, and desk-scale shapes make the memory
cost irrelevant. Each op short-circuits to a plain value when grad recording
is off, so inference and finite-difference loops pay no graph overhead.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_grad_enabled = True

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class no_grad:
    """Context manager that disables graph recording (forward values only)."""

    __slots__ = ("_prev",)

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        if not (isinstance(data, np.ndarray) and data.dtype == np.float64):
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        """Backpropagate from a scalar output through the recorded graph."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) != 1 else axes[0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """Wrap an array as a trainable leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _graph_out(data, parents, backward) -> Tensor:
    out = Tensor(data)
    out.requires_grad = True
    out._parents = parents
    out._backward = backward
    return out


def _accumulate(t: Tensor, piece: np.ndarray):
    t.grad = piece if t.grad is None else t.grad + piece


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data
    if not _grad_enabled or not (a.requires_grad or b.requires_grad):
        return Tensor(data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _graph_out(data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    if not _grad_enabled or not a.requires_grad:
        return Tensor(-a.data)

    def backward(g):
        _accumulate(a, -g)

    return _graph_out(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data
    if not _grad_enabled or not (a.requires_grad or b.requires_grad):
        return Tensor(data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _graph_out(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data
    if not _grad_enabled or not (a.requires_grad or b.requires_grad):
        return Tensor(data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * data / b.data, b.data.shape))

    return _graph_out(data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    e = float(exponent)
    data = a.data**e
    if not _grad_enabled or not a.requires_grad:
        return Tensor(data)

    def backward(g):
        _accumulate(a, g * e * a.data ** (e - 1.0))

    return _graph_out(data, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)
    if not _grad_enabled or not a.requires_grad:
        return Tensor(data)

    def backward(g):
        _accumulate(a, g * 0.5 / data)

    return _graph_out(data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    if not _grad_enabled or not a.requires_grad:
        return Tensor(data)

    def backward(g):
        _accumulate(a, g * data)

    return _graph_out(data, (a,), backward)


def gelu(a) -> Tensor:
    """Exact GELU: x * Phi(x) with the Gaussian CDF via erf."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf
    if not _grad_enabled or not a.requires_grad:
        return Tensor(data)

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accumulate(a, g * (cdf + x * pdf))

    return _graph_out(data, (a,), backward)


# -- reductions and shape ops ------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not _grad_enabled or not a.requires_grad:
        return Tensor(data)
    shape = a.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, shape))

    return _graph_out(data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    if not _grad_enabled or not a.requires_grad:
        return Tensor(data)
    shape = a.data.shape
    n = a.data.size / data.size

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / n, shape))

    return _graph_out(data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)
    if not _grad_enabled or not a.requires_grad:
        return Tensor(data)
    old = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(old))

    return _graph_out(data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    data = a.data.transpose(axes)
    if not _grad_enabled or not a.requires_grad:
        return Tensor(data)

    def backward(g):
        inverse = sorted(range(len(axes)), key=axes.__getitem__)
        _accumulate(a, g.transpose(inverse))

    return _graph_out(data, (a,), backward)


def take(a, idx) -> Tensor:
    """Basic (slice/index) selection; fancy indexing is not supported."""
    a = as_tensor(a)
    data = a.data[idx]
    if not _grad_enabled or not a.requires_grad:
        return Tensor(data)
    shape = a.data.shape

    def backward(g):
        z = np.zeros(shape)
        z[idx] += g
        _accumulate(a, z)

    return _graph_out(data, (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    if not _grad_enabled or not any(t.requires_grad for t in tensors):
        return Tensor(data)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                _accumulate(t, piece)

    return _graph_out(data, tuple(tensors), backward)


# -- fused primitives --------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data @ b.data
    if not _grad_enabled or not (a.requires_grad or b.requires_grad):
        return Tensor(data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _graph_out(data, (a, b), backward)


def linear(x, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map x @ w + b for x of shape (..., d_in)."""
    x, w = as_tensor(x), as_tensor(w)
    data = x.data @ w.data
    if b is not None:
        data += b.data
    if not _grad_enabled or not (
        x.requires_grad or w.requires_grad or (b is not None and b.requires_grad)
    ):
        return Tensor(data)
    d_in, d_out = w.data.shape

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g @ w.data.T)
        if w.requires_grad:
            _accumulate(w, x.data.reshape(-1, d_in).T @ g.reshape(-1, d_out))
        if b is not None and b.requires_grad:
            _accumulate(b, g.reshape(-1, d_out).sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _graph_out(data, parents, backward)


def layer_norm(x, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    x = as_tensor(x)
    d = x.data.shape[-1]
    mu = np.add.reduce(x.data, -1, keepdims=True)
    mu /= d
    xc = x.data - mu
    var = np.add.reduce(xc * xc, -1, keepdims=True)
    var /= d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data
    if not _grad_enabled or not (x.requires_grad or gain.requires_grad or bias.requires_grad):
        return Tensor(data)

    def backward(g):
        if x.requires_grad:
            gh = g * gain.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = np.mean(gh * xhat, axis=-1, keepdims=True)
            _accumulate(x, inv * (gh - m1 - xhat * m2))
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))

    return _graph_out(data, (x, gain, bias), backward)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtraction) along `axis`."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / np.add.reduce(e, axis, keepdims=True)
    if not _grad_enabled or not x.requires_grad:
        return Tensor(data)

    def backward(g):
        _accumulate(x, data * (g - np.add.reduce(g * data, axis, keepdims=True)))

    return _graph_out(data, (x,), backward)


def check_finite(t: Tensor, what: str) -> Tensor:
    """Raise if `t` contains non-finite values; returns `t` unchanged."""
    if not np.isfinite(t.data).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return t


ScalarFn = Callable[[], Tensor]
