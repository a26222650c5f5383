"""Reverse-mode automatic differentiation on an explicit tape.

Nodes hold either Python/NumPy scalars or NumPy arrays; scalar graphs are
the exact special case used for gradient checks, array graphs let a whole
collocation batch share one tape. Every node records its parents together
with a vector-Jacobian product closure; ``Tape.backward`` walks the record
in reverse creation order, which is a valid reverse topological order.

The helpers at the bottom (``tanh``, ``matmul`` ...) accept either nodes or
plain arrays, so network code can run with or without a tape.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class EvaluationError(ArithmeticError):
    """Forward evaluation left the operation's domain."""


class TapeMismatch(ValueError):
    pass


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after NumPy broadcasting."""
    if np.shape(g) == tuple(shape):
        return g
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


class AdNode:
    __slots__ = ("tape", "value", "grad", "parents", "requires_grad", "__weakref__")

    # make ndarray.__radd__ etc. defer to us
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", value, parents=(), requires_grad=True):
        self.tape = tape
        self.value = value
        self.grad = None
        self.parents = parents
        self.requires_grad = requires_grad

    def __repr__(self):
        return f"AdNode(value={self.value!r}, grad={self.grad!r})"

    @property
    def shape(self):
        return np.shape(self.value)

    # -- operators -------------------------------------------------------
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

    def __pow__(self, other):
        return pow(self, other)

    def __rpow__(self, other):
        return pow(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


class Tape:
    """Owner of one evaluation graph."""

    def __init__(self):
        self.nodes: list[AdNode] = []

    def var(self, value) -> AdNode:
        value = np.array(value, dtype=float) if np.ndim(value) else np.float64(value)
        node = AdNode(self, value, (), True)
        self.nodes.append(node)
        return node

    def const(self, value) -> AdNode:
        value = np.asarray(value, dtype=float) if np.ndim(value) else np.float64(value)
        return AdNode(self, value, (), False)

    def _record(self, value, parents) -> AdNode:
        live = tuple((p, vjp) for p, vjp in parents if p.requires_grad)
        node = AdNode(self, value, live, bool(live))
        if live:
            self.nodes.append(node)
        return node

    def zero_grad(self):
        for node in self.nodes:
            node.grad = None

    def backward(self, out: AdNode, seed=None):
        if out.tape is not self:
            raise TapeMismatch("output node belongs to another tape")
        out.grad = np.ones_like(out.value) if seed is None else seed
        for node in reversed(self.nodes):
            g = node.grad
            if g is None or not node.parents:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(g)
                parent.grad = contrib if parent.grad is None else parent.grad + contrib


def _lift(x, tape: Tape) -> AdNode:
    if isinstance(x, AdNode):
        if x.tape is not tape:
            raise TapeMismatch("operands live on different tapes")
        return x
    return tape.const(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, AdNode):
            return x.tape
    raise TypeError("at least one operand must be an AdNode")


def _binary(x, y):
    tape = _tape_of(x, y)
    return tape, _lift(x, tape), _lift(y, tape)


# -- primitive operations ----------------------------------------------------


def add(x, y) -> AdNode:
    tape, x, y = _binary(x, y)
    sx, sy = np.shape(x.value), np.shape(y.value)
    return tape._record(
        x.value + y.value,
        ((x, lambda g: _unbroadcast(g, sx)), (y, lambda g: _unbroadcast(g, sy))),
    )


def sub(x, y) -> AdNode:
    tape, x, y = _binary(x, y)
    sx, sy = np.shape(x.value), np.shape(y.value)
    return tape._record(
        x.value - y.value,
        ((x, lambda g: _unbroadcast(g, sx)), (y, lambda g: -_unbroadcast(g, sy))),
    )


def mul(x, y) -> AdNode:
    tape, x, y = _binary(x, y)
    xv, yv = x.value, y.value
    sx, sy = np.shape(xv), np.shape(yv)
    return tape._record(
        xv * yv,
        ((x, lambda g: _unbroadcast(g * yv, sx)), (y, lambda g: _unbroadcast(g * xv, sy))),
    )


def div(x, y) -> AdNode:
    tape, x, y = _binary(x, y)
    xv, yv = x.value, y.value
    if np.any(yv == 0):
        raise EvaluationError("division by zero")
    out = xv / yv
    sx, sy = np.shape(xv), np.shape(yv)
    return tape._record(
        out,
        (
            (x, lambda g: _unbroadcast(g / yv, sx)),
            (y, lambda g: _unbroadcast(-g * out / yv, sy)),
        ),
    )


def pow(x, y) -> AdNode:
    tape, x, y = _binary(x, y)
    xv, yv = x.value, y.value
    if not y.requires_grad and np.ndim(yv) == 0 and float(yv).is_integer():
        if float(yv) < 0 and np.any(xv == 0):
            raise EvaluationError("zero to a negative power")
    elif np.any(xv <= 0):
        raise EvaluationError("real power of a nonpositive base")
    out = xv**yv
    sx, sy = np.shape(xv), np.shape(yv)
    parents = [(x, lambda g: _unbroadcast(g * yv * xv ** (yv - 1), sx))]
    if y.requires_grad:
        parents.append((y, lambda g: _unbroadcast(g * out * np.log(xv), sy)))
    return tape._record(out, parents)


def _unary(x: AdNode, value, local: Callable):
    return x.tape._record(value, ((x, local),))


def exp(x):
    if not isinstance(x, AdNode):
        return np.exp(x)
    out = np.exp(x.value)
    return _unary(x, out, lambda g: g * out)


def log(x):
    if not isinstance(x, AdNode):
        if np.any(np.asarray(x) <= 0):
            raise EvaluationError("log of a nonpositive value")
        return np.log(x)
    if np.any(x.value <= 0):
        raise EvaluationError("log of a nonpositive value")
    xv = x.value
    return _unary(x, np.log(xv), lambda g: g / xv)


def tanh(x):
    if not isinstance(x, AdNode):
        return np.tanh(x)
    out = np.tanh(x.value)
    return _unary(x, out, lambda g: g * (1.0 - out * out))


def _np_sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x):
    if not isinstance(x, AdNode):
        return _np_sigmoid(x)
    out = _np_sigmoid(x.value)
    return _unary(x, out, lambda g: g * out * (1.0 - out))


def _np_softplus(v):
    return np.logaddexp(0.0, v)


def softplus(x):
    if not isinstance(x, AdNode):
        return _np_softplus(x)
    xv = x.value
    return _unary(x, _np_softplus(xv), lambda g: g * _np_sigmoid(xv))


def sum(x, axis=None):
    if not isinstance(x, AdNode):
        return np.sum(x, axis=axis)
    shape = np.shape(x.value)
    if axis is None:
        return _unary(x, np.sum(x.value), lambda g: np.broadcast_to(g, shape).copy())
    return _unary(
        x, np.sum(x.value, axis=axis),
        lambda g: np.broadcast_to(np.expand_dims(g, axis), shape).copy(),
    )


def mean(x):
    if not isinstance(x, AdNode):
        return np.mean(x)
    n = np.size(x.value)
    return sum(x) * (1.0 / n)


def matmul(x, y):
    if not isinstance(x, AdNode) and not isinstance(y, AdNode):
        return np.matmul(x, y)
    tape, x, y = _binary(x, y)
    xv, yv = x.value, y.value
    if xv.ndim not in (1, 2) or yv.ndim not in (1, 2):
        raise ValueError("matmul supports 1-D and 2-D operands")

    def gx(g):
        if yv.ndim == 1:
            return np.outer(g, yv) if xv.ndim == 2 else g * yv
        return g @ yv.T

    def gy(g):
        if xv.ndim == 1:
            return np.outer(xv, g) if yv.ndim == 2 else g * xv
        return xv.T @ g if yv.ndim == 2 else xv.T @ g

    return tape._record(xv @ yv, ((x, gx), (y, gy)))


def reshape(x, shape):
    if not isinstance(x, AdNode):
        return np.reshape(x, shape)
    orig = np.shape(x.value)
    return _unary(x, np.reshape(x.value, shape), lambda g: np.reshape(g, orig))


def getitem(x: AdNode, idx):
    shape = np.shape(x.value)

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return out

    return _unary(x, x.value[idx], vjp)


def take(x, indices):
    """Gather ``x[indices]`` along the first axis (repeats allowed)."""
    if not isinstance(x, AdNode):
        return np.asarray(x)[indices]
    return getitem(x, np.asarray(indices))


def stack(xs):
    """Stack scalar or equal-shape nodes along a new leading axis."""
    tape = _tape_of(*xs)
    nodes = [_lift(x, tape) for x in xs]
    value = np.stack([n.value for n in nodes])
    parents = tuple((n, (lambda i: lambda g: g[i])(i)) for i, n in enumerate(nodes))
    return tape._record(value, parents)


def value_of(x):
    return x.value if isinstance(x, AdNode) else x
