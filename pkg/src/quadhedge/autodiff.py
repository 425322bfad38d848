"""Small reverse-mode automatic differentiation over numpy arrays.

Operations are recorded at array granularity on an explicit :class:`Tape`.
Nodes are appended in creation order, so walking the tape backwards is a
valid topological order.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class TapeError(RuntimeError):
    pass


class Node:
    __slots__ = ("value", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, value, requires_grad=False, parents=(), backward=None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return np.shape(self.value)

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
        if isinstance(other, Node):
            raise TypeError("division by a node is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=float))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        if exponent != 2:
            raise ValueError("only squaring is supported")
        return square(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Records array operations for one backward pass.

    A tape can be differentiated once; a second :meth:`backward` raises
    :class:`TapeError`.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._params: dict[tuple[int, int], tuple[object, int, Node]] = {}
        self.consumed = False

    def _record(self, node: Node) -> Node:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        if node.requires_grad:
            self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return Node(np.asarray(value, dtype=float))

    def param(self, owner, index: int, value: np.ndarray) -> Node:
        key = (id(owner), index)
        hit = self._params.get(key)
        if hit is not None:
            return hit[2]
        node = Node(value, requires_grad=True)
        self._params[key] = (owner, index, node)
        self.nodes.append(node)
        return node

    def backward(self, output: Node, output_gradient=1.0) -> "Gradients":
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        self.consumed = True
        if not output.requires_grad:
            return Gradients(self._params, zero=True)
        output.grad = np.broadcast_to(
            np.asarray(output_gradient, dtype=float), np.shape(output.value)
        ).copy()
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)
        return Gradients(self._params)


class Gradients:
    """Parameter gradients keyed by owning network."""

    def __init__(self, params, zero=False):
        self._by_owner: dict[int, tuple[object, dict[int, np.ndarray]]] = {}
        for owner, index, node in params.values():
            g = node.grad
            if zero or g is None:
                g = np.zeros_like(node.value)
            self._by_owner.setdefault(id(owner), (owner, {}))[1][index] = g

    def for_owner(self, owner, n_params: int) -> list[np.ndarray]:
        entry = self._by_owner.get(id(owner))
        table = entry[1] if entry else {}
        return [table.get(i) for i in range(n_params)]

    def __contains__(self, owner):
        return id(owner) in self._by_owner


def _accumulate(node: Node, grad):
    if node.grad is None:
        node.grad = grad
    else:
        node.grad = node.grad + grad


def _unbroadcast(grad, shape):
    if np.shape(grad) == tuple(shape):
        return grad
    ndim = len(shape)
    while grad.ndim > ndim:
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x, dtype=float))


# Differentiable ops append to the innermost tape entered via `recording`.
_ACTIVE: list[Tape] = []


class recording:
    """Context manager making ``tape`` the target for recorded operations."""

    def __init__(self, tape: Tape):
        self.tape = tape

    def __enter__(self):
        _ACTIVE.append(self.tape)
        return self.tape

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False


def _active():
    return _ACTIVE[-1] if _ACTIVE else None


def _make(value, parents: Sequence[Node], backward: Callable) -> Node:
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Node(value)
    tape = _active()
    if tape is None:
        raise TapeError("differentiable operation outside of a recording context")
    return tape._record(Node(value, True, tuple(parents), backward))


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, np.shape(a.value)))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, np.shape(b.value)))

    return _make(a.value + b.value, (a, b), backward)


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, np.shape(a.value)))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, np.shape(b.value)))

    return _make(a.value - b.value, (a, b), backward)


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.value, np.shape(a.value)))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.value, np.shape(b.value)))

    return _make(a.value * b.value, (a, b), backward)


def square(a) -> Node:
    a = _as_node(a)

    def backward(g):
        _accumulate(a, 2.0 * a.value * g)

    return _make(a.value * a.value, (a,), backward)


def absolute(a) -> Node:
    """|a| with subgradient 0 at a == 0."""
    a = _as_node(a)

    def backward(g):
        _accumulate(a, np.sign(a.value) * g)

    return _make(np.abs(a.value), (a,), backward)


def matmul(x, w) -> Node:
    x, w = _as_node(x), _as_node(w)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g @ w.value.T)
        if w.requires_grad:
            _accumulate(w, x.value.T @ g)

    return _make(x.value @ w.value, (x, w), backward)


def linear(x, w, b) -> Node:
    """Fused ``x @ w + b`` for a 2-D batch ``x``."""
    x, w, b = _as_node(x), _as_node(w), _as_node(b)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g @ w.value.T)
        if w.requires_grad:
            _accumulate(w, x.value.T @ g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0))

    return _make(x.value @ w.value + b.value, (x, w, b), backward)


def relu(a) -> Node:
    a = _as_node(a)
    mask = a.value > 0

    def backward(g):
        _accumulate(a, g * mask)

    return _make(a.value * mask, (a,), backward)


def sigmoid(a) -> Node:
    a = _as_node(a)
    out = _sigmoid(a.value)

    def backward(g):
        _accumulate(a, g * out * (1.0 - out))

    return _make(out, (a,), backward)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Node:
    """Normalize each row of ``a`` to zero mean / unit variance, then scale."""
    a, gain, bias = _as_node(a), _as_node(gain), _as_node(bias)
    x = a.value
    inv_n = 1.0 / x.shape[-1]
    xc = x - x.sum(axis=-1, keepdims=True) * inv_n
    inv = 1.0 / np.sqrt((xc * xc).sum(axis=-1, keepdims=True) * inv_n + eps)
    xhat = xc * inv
    out = xhat * gain.value + bias.value

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))
        if a.requires_grad:
            gh = g * gain.value
            n = x.shape[-1]
            dx = inv / n * (
                n * gh
                - gh.sum(axis=-1, keepdims=True)
                - xhat * (gh * xhat).sum(axis=-1, keepdims=True)
            )
            _accumulate(a, dx)

    return _make(out, (a, gain, bias), backward)


def scale_by(a, factor: np.ndarray) -> Node:
    """Multiply by a constant array (e.g. a dropout mask)."""
    return mul(a, factor)


def reshape(a, shape) -> Node:
    a = _as_node(a)
    old = np.shape(a.value)

    def backward(g):
        _accumulate(a, np.reshape(g, old))

    return _make(np.reshape(a.value, shape), (a,), backward)


def concat(items, axis: int = -1) -> Node:
    nodes = [_as_node(x) for x in items]
    sizes = [np.shape(n.value)[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for n, piece in zip(nodes, np.split(g, splits, axis=axis)):
            if n.requires_grad:
                _accumulate(n, piece)

    return _make(np.concatenate([n.value for n in nodes], axis=axis), nodes, backward)


def column(a, j: int) -> Node:
    a = _as_node(a)

    def backward(g):
        full = np.zeros_like(a.value)
        full[:, j] = g
        _accumulate(a, full)

    return _make(a.value[:, j], (a,), backward)


def total(a) -> Node:
    a = _as_node(a)

    def backward(g):
        _accumulate(a, np.broadcast_to(g, np.shape(a.value)).copy())

    return _make(np.sum(a.value), (a,), backward)


def mean(a) -> Node:
    a = _as_node(a)
    n = np.size(a.value)

    def backward(g):
        _accumulate(a, np.full(np.shape(a.value), g / n))

    return _make(np.mean(a.value), (a,), backward)


def _sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
