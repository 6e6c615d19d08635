"""Dense float64 tensors with a reverse-mode gradient tape.

Each differentiable op returns a new :class:`Tensor` holding references to its
inputs and a closure that maps the output gradient to input gradients.
:func:`backward` walks the graph in reverse topological order.
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import ContractViolation, UnsupportedOperationError

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, *, _parents=(), _backward=None, op="leaf"):
        arr = np.array(data, dtype=np.float64)
        if any(s <= 0 for s in arr.shape):
            raise ContractViolation(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op
        # leaves start zero-filled so non-participants read as zero after backward
        self.grad = np.zeros_like(arr) if (self.requires_grad and not self._parents) else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    # numpy ufuncs would silently bypass the tape
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        raise UnsupportedOperationError(f"numpy ufunc {ufunc.__name__!r} is not a differentiable op")

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedOperationError(f"numpy function {func.__name__!r} is not a differentiable op")

    def __setitem__(self, key, value):
        raise UnsupportedOperationError("in-place assignment is not supported on tensors")

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, req, _parents=parents if req else (), _backward=backward if req else None, op=op)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    nd = grad.ndim - len(shape)
    if nd > 0:
        grad = grad.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), back, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), back, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), back, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), back, "div")


def power(a, exponent):
    if isinstance(exponent, Tensor):
        raise UnsupportedOperationError("tensor exponents are not supported")
    p = float(exponent)

    def back(g):
        return (g * p * a.data ** (p - 1.0),)

    return _result(a.data ** p, (a,), back, "pow")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractViolation(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), back, "matmul")


def transpose(a):
    if a.ndim != 2:
        raise ContractViolation("transpose expects a 2-d tensor")

    def back(g):
        return (g.T,)

    return _result(a.data.T, (a,), back, "transpose")


def relu(a):
    mask = a.data > 0

    def back(g):
        return (g * mask,)

    return _result(np.where(mask, a.data, 0.0), (a,), back, "relu")


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    u = _SQRT_2_OVER_PI * (x + _GELU_C * x ** 3)
    t = np.tanh(u)

    def back(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du),)

    return _result(0.5 * x * (1.0 + t), (a,), back, "gelu")


def tanh(a):
    t = np.tanh(a.data)

    def back(g):
        return (g * (1.0 - t ** 2),)

    return _result(t, (a,), back, "tanh")


def exp(a):
    e = np.exp(a.data)

    def back(g):
        return (g * e,)

    return _result(e, (a,), back, "exp")


def log(a):
    def back(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), back, "log")


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(a.data.mean(axis=axis, keepdims=keepdims), (a,), back, "mean")


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (a,), back, "softmax")


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def back(g):
        s = np.exp(out)
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), back, "log_softmax")


def l2_norm(a, axis=-1, keepdims=True):
    """Euclidean norm along ``axis``; zero vectors get a zero subgradient."""
    n = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True))

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (g * a.data / safe,)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _result(out, (a,), back, "l2_norm")


def layer_norm(x, gain, shift, eps=1e-5):
    """Normalise each row of ``x`` to zero mean, unit variance, then scale and shift."""
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        d = x.shape[-1]
        gx = g * gain.data
        dx = inv / d * (d * gx - gx.sum(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, shift.shape)

    return _result(xhat * gain.data + shift.data, (x, gain, shift), back, "layer_norm")


def getitem(a, key):
    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _result(a.data[key], (a,), back, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat")


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order[::-1]


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every participating tensor."""
    if not isinstance(loss, Tensor):
        raise ContractViolation("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in _topological(loss):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
