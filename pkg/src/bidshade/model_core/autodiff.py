"""Tape-based reverse-mode differentiation over numpy arrays.

Only the operators needed by the DeepFM-shaped models are provided. Nodes
are appended to the tape in evaluation order, so walking the tape backwards
is a valid topological order and each node is visited once.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..errors import UsageError


class Node:
    __slots__ = ("value", "parents", "requires_grad", "grad", "name", "tape")
    __array_priority__ = 100

    def __init__(self, tape, value, parents=(), requires_grad=False, name=None):
        self.tape = tape
        self.value = value
        self.parents = parents  # tuple of (node, vjp)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node({self.name or ''} shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)


class Tape:
    def __init__(self):
        self.nodes = []
        self.params = {}
        self.finished = False

    def var(self, value, name=None) -> Node:
        n = Node(self, np.asarray(value), requires_grad=True, name=name)
        self.nodes.append(n)
        if name is not None:
            self.params[name] = n
        return n

    def const(self, value) -> Node:
        # python scalars stay weakly typed so float32 graphs are not upcast
        if not isinstance(value, (int, float)):
            value = np.asarray(value)
        return Node(self, value)

    def lift(self, x) -> Node:
        return x if isinstance(x, Node) else self.const(x)

    def record(self, value, parents) -> Node:
        parents = tuple((p, f) for p, f in parents if p.requires_grad)
        n = Node(self, value, parents, requires_grad=bool(parents))
        if n.requires_grad:
            self.nodes.append(n)
        return n

    def backward(self, out: Node, seed=None):
        """Accumulate d(out)/d(node) into ``node.grad`` for every node that
        requires a gradient. ``out`` must be a scalar unless ``seed`` is given."""
        if not isinstance(out, Node) or out.tape is not self:
            raise UsageError("backward() needs a node recorded on this tape")
        if not self.nodes:
            raise UsageError("backward() called before any forward computation")
        if not out.requires_grad:
            return
        if seed is None:
            if np.size(out.value) != 1:
                raise UsageError("backward() on a non-scalar output needs a seed")
            seed = np.ones_like(out.value)
        for n in self.nodes:
            n.grad = None
        out.grad = np.asarray(seed, dtype=out.value.dtype)
        for n in reversed(self.nodes):
            if n.grad is None:
                continue
            for p, vjp in n.parents:
                g = vjp(n.grad)
                p.grad = g if p.grad is None else p.grad + g
        self.finished = True

    def grads(self) -> dict:
        """Gradients of named parameters (zeros where the output does not depend on them)."""
        return {k: (n.grad if n.grad is not None else np.zeros_like(n.value)) for k, n in self.params.items()}


def _tape(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise UsageError("operation needs at least one Node argument")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b):
    t = _tape(a, b)
    a, b = t.lift(a), t.lift(b)
    return t.record(a.value + b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b):
    t = _tape(a, b)
    a, b = t.lift(a), t.lift(b)
    return t.record(a.value - b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a, b):
    t = _tape(a, b)
    a, b = t.lift(a), t.lift(b)
    return t.record(a.value * b.value, [
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    ])


def div(a, b):
    t = _tape(a, b)
    a, b = t.lift(a), t.lift(b)
    out = a.value / b.value
    return t.record(out, [
        (a, lambda g: _unbroadcast(g / b.value, a.shape)),
        (b, lambda g: _unbroadcast(-g * out / b.value, b.shape)),
    ])


def relu(x):
    mask = x.value > 0
    return x.tape.record(np.where(mask, x.value, 0).astype(x.value.dtype), [(x, lambda g: g * mask)])


def sigmoid(x):
    out = expit(x.value)
    return x.tape.record(out, [(x, lambda g: g * out * (1 - out))])


def log(x):
    return x.tape.record(np.log(x.value), [(x, lambda g: g / x.value)])


def log1p(x):
    return x.tape.record(np.log1p(x.value), [(x, lambda g: g / (1 + x.value))])


def square(x):
    return x.tape.record(x.value * x.value, [(x, lambda g: 2 * g * x.value)])


def cast(x, dtype):
    if x.value.dtype == dtype:
        return x
    src = x.value.dtype
    return x.tape.record(x.value.astype(dtype), [(x, lambda g: g.astype(src))])


def stop_gradient(x):
    """Same value, no gradient path back to ``x``."""
    return x.tape.const(np.array(x.value, copy=True))


# -- reductions and shape ----------------------------------------------------

def sum_(x, axis=None):
    shape = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return x.tape.record(np.sum(x.value, axis=axis), [(x, vjp)])


def mean(x, axis=None):
    n = np.size(x.value) if axis is None else x.shape[axis]
    return sum_(x, axis) * (1.0 / n)


def reshape(x, shape):
    old = x.shape
    return x.tape.record(x.value.reshape(shape), [(x, lambda g: g.reshape(old))])


def concat(xs, axis):
    t = _tape(*xs)
    xs = [t.lift(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def piece(i):
        sl = [slice(None)] * xs[i].value.ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        return lambda g: g[tuple(sl)]

    return t.record(np.concatenate([x.value for x in xs], axis=axis), [(x, piece(i)) for i, x in enumerate(xs)])


def stack(xs, axis):
    t = _tape(*xs)
    xs = [t.lift(x) for x in xs]

    def piece(i):
        return lambda g: np.take(g, i, axis=axis)

    return t.record(np.stack([x.value for x in xs], axis=axis), [(x, piece(i)) for i, x in enumerate(xs)])


def column(x, j):
    """x[:, j] for a 2-D node."""
    shape, dtype = x.shape, x.value.dtype

    def vjp(g):
        out = np.zeros(shape, dtype=dtype)
        out[:, j] = g
        return out

    return x.tape.record(x.value[:, j], [(x, vjp)])


# -- linear algebra and model ops ---------------------------------------------

def matmul(a, b):
    t = _tape(a, b)
    a, b = t.lift(a), t.lift(b)
    return t.record(a.value @ b.value, [
        (a, lambda g: g @ b.value.T),
        (b, lambda g: a.value.T @ g),
    ])


def gather_rows(table, idx):
    """table[idx] for an integer index array of any shape."""
    idx = np.asarray(idx)
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx.ravel(), g.reshape(-1, shape[1]))
        return out

    return table.tape.record(table.value[idx], [(table, vjp)])


def fm_interaction(e):
    """Sum over field pairs i<j of <e_i, e_j> for e of shape (n, F, d)."""
    v = e.value
    s = v.sum(axis=1)
    out = 0.5 * ((s * s).sum(axis=1) - (v * v).sum(axis=(1, 2)))
    return e.tape.record(out, [(e, lambda g: g[:, None, None] * (s[:, None, :] - v))])


def bce_with_logits(z, y):
    """Elementwise binary cross-entropy of sigmoid(z) against labels y."""
    zv = z.value
    y = np.asarray(y, dtype=zv.dtype)
    loss = np.maximum(zv, 0) - zv * y + np.log1p(np.exp(-np.abs(zv)))
    p = expit(zv)
    return z.tape.record(loss, [(z, lambda g: g * (p - y))])
