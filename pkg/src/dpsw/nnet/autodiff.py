"""Tape-free reverse-mode autodiff over float64 numpy arrays.

Each :class:`Tensor` produced by an operation keeps references to its
parents and a closure mapping the upstream gradient to one gradient per
parent. :func:`backward` walks the graph in reverse topological order.

Only the primitives defined here (plus operations registered through
:func:`custom_op`) are differentiable. Passing a Tensor to any other numpy
ufunc raises :class:`~dpsw.errors.UnsupportedPrimitiveError` when the graph
is built, not when gradients are requested.
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError, UnsupportedPrimitiveError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    # numpy interop: arithmetic ufuncs dispatch to Tensor ops, the rest raise
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method == "__call__" and not kwargs:
            op = _UFUNC_DISPATCH.get(ufunc)
            if op is not None:
                return op(*inputs)
        raise UnsupportedPrimitiveError(
            f"numpy.{ufunc.__name__} is not a differentiable primitive; use dpsw.nnet.autodiff ops"
        )

    @property
    def shape(self):
        return self.data.shape

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(data, parents, backward_fn):
    """Register a node whose ``backward_fn(g)`` returns one gradient per parent."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return custom_op(out, (a, b), backward)


def neg(a):
    return custom_op(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    if isinstance(exponent, Tensor):
        raise UnsupportedPrimitiveError("tensor exponents: use exp(y * log(x))")
    p = float(exponent)
    return custom_op(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def square(a):
    return custom_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return custom_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a):
    return custom_op(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    old = a.shape
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def exp(a):
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,))


def expm1(a):
    out = np.expm1(a.data)
    return custom_op(out, (a,), lambda g: (g * (out + 1.0),))


def log(a):
    return custom_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return custom_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def elu(a):
    """ELU with alpha = 1: identity for x > 0, exp(x) - 1 otherwise."""
    x = a.data
    neg_part = np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg_part)
    slope = np.where(x > 0, 1.0, neg_part + 1.0)
    return custom_op(out, (a,), lambda g: (g * slope,))


def identity(a):
    return a


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return custom_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def getitem(a, index):
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return custom_op(a.data[index], (a,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return custom_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def where(cond, a, b):
    """Select elementwise; ``cond`` is a constant boolean array."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)),
    )


def clip(a, lo=None, hi=None):
    """Clamp to constant bounds; gradient is zero where the bound is active."""
    x = a.data
    out = np.clip(x, lo, hi)
    inside = np.ones_like(x, dtype=bool)
    if lo is not None:
        inside &= x > lo
    if hi is not None:
        inside &= x < hi
    return custom_op(out, (a,), lambda g: (np.where(inside, g, 0.0),))


_UFUNC_DISPATCH = {
    np.add: add,
    np.subtract: sub,
    np.multiply: mul,
    np.true_divide: div,
    np.matmul: matmul,
}


def _topological(root):
    order = []
    seen = set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward_from(root, seed=None):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    grads = {id(root): np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=np.float64)}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


@dataclass
class GradientTape:
    """Scalar loss value and parameter gradients keyed by parameter name."""

    loss: float
    grads: dict = field(default_factory=dict)


def backward(loss, params):
    """Reverse-mode gradients of a scalar ``loss`` w.r.t. named parameters.

    ``params`` maps names to leaf Tensors. Parameters the loss does not reach
    get zero gradients, shaped like the parameter.
    """
    if loss.data.size != 1:
        raise ShapeError("backward requires a scalar loss")
    for p in params.values():
        p.grad = None
    if loss.requires_grad:
        backward_from(loss)
    grads = {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()
    }
    return GradientTape(loss=float(loss.data), grads=grads)
