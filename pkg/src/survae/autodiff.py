"""Small reverse-mode differentiation engine over dense float64 arrays.

A :class:`Node` wraps a numpy array.  Every primitive below returns a new
node that remembers its operands and a closure mapping the output gradient
to operand gradients.  :func:`backward` walks the recorded graph in reverse
topological order.

Nodes built only from constants do not record parents, so data-only
subexpressions (e.g. ``log(t)`` of observed times) cost nothing at backward
time.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Node",
    "as_node",
    "constant",
    "parameter",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "tanh",
    "sigmoid",
    "softplus",
    "softmax",
    "log",
    "exp",
    "power",
    "square",
    "clip",
    "total",
    "mean",
    "index",
    "take_columns",
    "dropout",
    "finite_diff_gradient",
]


_counter = itertools.count()


class Node:
    __slots__ = ("value", "_grad", "parents", "op", "_backward", "requires_grad", "_id")

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        op: str = "leaf",
        backward_fn: Callable | None = None,
        requires_grad: bool = False,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad = None
        self.op = op
        self.requires_grad = requires_grad
        # creation order is a valid topological order of the graph
        self._id = next(_counter)
        if requires_grad and parents:
            self.parents = tuple(parents)
            self._backward = backward_fn
        else:
            self.parents = ()
            self._backward = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        # Nodes never touched by a backward pass report a zero gradient.
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    return Node(x)


def parameter(x) -> Node:
    """Leaf node that collects a gradient."""
    return Node(np.array(x, dtype=np.float64), requires_grad=True)


def _make(value, parents, op, backward_fn) -> Node:
    req = any(p.requires_grad for p in parents)
    return Node(value, parents, op, backward_fn, requires_grad=req)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Node, b: Node, op: str) -> tuple:
    if a.value.shape == b.value.shape:
        return a.value.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"{op}: operand shapes {a.shape} and {b.shape} do not conform"
        ) from None


# -- elementwise binary ------------------------------------------------------


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(
        a.value + b.value,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(
        a.value - b.value,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return _make(
        av * bv,
        (a, b),
        "mul",
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv
    return _make(
        out,
        (a, b),
        "div",
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def power(base, exponent) -> Node:
    """``base ** exponent`` for nonnegative base; d/d(exponent) is 0 where base == 0."""
    base, exponent = as_node(base), as_node(exponent)
    _check_broadcast(base, exponent, "power")
    bv, ev = base.value, exponent.value
    out = bv**ev
    pos = bv > 0
    safe_b = np.where(pos, bv, 1.0)

    def bw(g):
        gb = g * ev * np.where(pos, out / safe_b, 0.0)
        ge = g * np.where(pos, out * np.log(safe_b), 0.0)
        return _unbroadcast(gb, bv.shape), _unbroadcast(ge, ev.shape)

    return _make(out, (base, exponent), "power", bw)


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, (a,), "neg", lambda g: (-g,))


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Node:
    """Matrix-vector or matrix-matrix product (1-D or 2-D operands)."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise ValueError(f"matmul: operand shapes {av.shape} and {bv.shape} do not conform")

    def bw(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), "matmul", bw)


# -- elementwise unary -------------------------------------------------------


def relu(a) -> Node:
    a = as_node(a)
    on = a.value > 0
    return _make(np.where(on, a.value, 0.0), (a,), "relu", lambda g: (g * on,))


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Node:
    a = as_node(a)
    # exp(-|x|) form avoids overflow for large negative inputs
    e = np.exp(-np.abs(a.value))
    out = np.where(a.value >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Node:
    a = as_node(a)
    v = a.value
    out = np.logaddexp(0.0, v)
    e = np.exp(-np.abs(v))
    sig = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), "softplus", lambda g: (g * sig,))


def softmax(a) -> Node:
    """Softmax over the last axis."""
    a = as_node(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    out = ez / ez.sum(axis=-1, keepdims=True)
    return _make(
        out,
        (a,),
        "softmax",
        lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),),
    )


def log(a) -> Node:
    a = as_node(a)
    v = a.value
    return _make(np.log(v), (a,), "log", lambda g: (g / v,))


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def square(a) -> Node:
    a = as_node(a)
    v = a.value
    return _make(v * v, (a,), "square", lambda g: (2.0 * g * v,))


def clip(a, lo: float | None = None, hi: float | None = None) -> Node:
    """Clamp to [lo, hi]; the gradient is zero on clamped entries."""
    a = as_node(a)
    v = a.value
    out = np.clip(v, lo, hi)
    inside = out == v
    return _make(out, (a,), "clip", lambda g: (g * inside,))


# -- reductions and indexing -------------------------------------------------


def total(a, axis: int | None = None, keepdims: bool = False) -> Node:
    """Sum over ``axis`` (all entries when None)."""
    a = as_node(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), "sum", bw)


def mean(a, axis: int | None = None) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else a.shape[axis]
    return total(a, axis) * (1.0 / n)


def _is_basic(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(Ellipsis))) for k in keys)


def index(a, key) -> Node:
    """numpy-style indexing; repeated fancy indices accumulate gradient."""
    a = as_node(a)
    shape = a.shape
    basic = _is_basic(key)

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return _make(a.value[key], (a,), "index", bw)


def take_columns(a, cols) -> Node:
    """Index the last axis with a slice, integer, or index array."""
    a = as_node(a)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        if isinstance(cols, slice):
            out[..., cols] = g
        else:
            np.add.at(out, (Ellipsis, cols), g)
        return (out,)

    return _make(a.value[..., cols], (a,), "index", bw)


def dropout(a, mask) -> Node:
    """Multiply by a precomputed keep-mask.

    Masks from :func:`survae.nn.dropout_mask` already carry the 1/keep scale,
    so an all-ones mask is the identity.
    """
    a = as_node(a)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != a.shape and m.shape != a.shape[-1:]:
        raise ValueError(f"dropout: mask shape {m.shape} does not match {a.shape}")
    return _make(a.value * m, (a,), "dropout", lambda g: (_unbroadcast(g * m, a.shape),))


# -- backward ----------------------------------------------------------------


def _topo_order(root: Node) -> list[Node]:
    seen = {id(root): root}
    stack = [root]
    while stack:
        for p in stack.pop().parents:
            if id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda n: n._id)


def backward(root: Node) -> None:
    """Fill ``.grad`` of every node reachable from the scalar ``root``.

    Gradients of reachable nodes are reset first and contributions from
    shared subexpressions are summed, so repeated calls give the same result.
    """
    if root.value.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    order = _topo_order(root)
    for node in order:
        node._grad = None
    root._grad = np.ones_like(root.value)
    for node in reversed(order):
        g = node._grad
        if node._backward is None or g is None:
            continue
        for p, gp in zip(node.parents, node._backward(g)):
            if not p.requires_grad:
                continue
            p._grad = gp if p._grad is None else p._grad + gp
    for node in order:
        if node._grad is None:
            node._grad = np.zeros_like(node.value)


def finite_diff_gradient(f: Callable[[np.ndarray], float], point, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function; ``point`` may have any shape."""
    if step <= 0:
        raise ValueError("step must be positive")
    p = np.array(point, dtype=np.float64, copy=True)
    scalar_input = p.ndim == 0
    p = np.atleast_1d(p)
    flat = p.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(p[0] if scalar_input else p)
        flat[i] = orig - step
        fm = f(p[0] if scalar_input else p)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * step)
    return grad[0] if scalar_input else grad.reshape(p.shape)
