"""Reverse-mode automatic differentiation on dense float64 arrays.

A dynamic tape: every operation builds a new ``Node`` holding its forward
value and a vector-Jacobian rule. ``backward`` walks the graph once per call
and accumulates gradients into each node's persistent ``grad`` slot, so
repeated backward passes without zeroing add up (the usual optimizer
contract). A single graph must stay on one thread; sharing read-only leaf
nodes across graphs is safe.

Shapes follow numpy broadcasting. ``matmul`` supports stacked (batched)
operands with at least two dimensions each.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Input values outside the mathematical domain of the operation."""


class GraphError(ValueError):
    """The computation graph is used in a way its contract forbids."""


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Node:
    """One vertex of the computation graph: value, grad slot, and parents."""

    __slots__ = ("value", "grad", "parents", "op", "_vjp")

    def __init__(self, value, parents=(), op="leaf", _vjp=None, _validate=True):
        arr = _as_array(value)
        if _validate and not np.all(np.isfinite(arr)):
            raise DomainError("node values must be finite (got NaN or Inf)")
        self.value = arr
        self.grad = np.zeros_like(arr)
        self.parents = tuple(parents)
        self.op = op
        self._vjp = _vjp

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    # operator sugar; mirrors the functional API below
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(value) -> Node:
    """Leaf node for data entering the graph; finiteness is enforced here."""
    return Node(value, op="const")


def parameter(value) -> Node:
    """Leaf node for a trainable tensor; identical to ``constant`` except tag."""
    return Node(value, op="param")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(
        i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1
    )
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


def _binary_shapes(a: Node, b: Node, op: str) -> None:
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {a.value.shape} and {b.value.shape} do not broadcast"
        ) from None


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _binary_shapes(a, b, "add")
    return Node(
        a.value + b.value,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
        _validate=False,
    )


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _binary_shapes(a, b, "sub")
    return Node(
        a.value - b.value,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)),
        _validate=False,
    )


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _binary_shapes(a, b, "mul")
    return Node(
        a.value * b.value,
        (a, b),
        "mul",
        lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
        _validate=False,
    )


def scale(a, c: float) -> Node:
    a = as_node(a)
    c = float(c)
    return Node(a.value * c, (a,), "scale", lambda g: (g * c,), _validate=False)


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dimensions")
    if a.value.shape[-1] != b.value.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ ({a.value.shape} @ {b.value.shape})"
        )

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.value.shape)
        gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.value.shape)
        return ga, gb

    return Node(a.value @ b.value, (a, b), "matmul", vjp, _validate=False)


def sigmoid(a) -> Node:
    a = as_node(a)
    s = expit(a.value)
    return Node(s, (a,), "sigmoid", lambda g: (g * s * (1.0 - s),), _validate=False)


def tanh(a) -> Node:
    a = as_node(a)
    t = np.tanh(a.value)
    return Node(t, (a,), "tanh", lambda g: (g * (1.0 - t * t),), _validate=False)


def exp(a) -> Node:
    a = as_node(a)
    e = np.exp(a.value)
    return Node(e, (a,), "exp", lambda g: (g * e,), _validate=False)


def log(a) -> Node:
    a = as_node(a)
    if np.any(a.value <= 0.0):
        raise DomainError("log requires strictly positive inputs")
    return Node(np.log(a.value), (a,), "log", lambda g: (g / a.value,), _validate=False)


def softmax(a, axis: int = -1) -> Node:
    """Numerically stable softmax along ``axis`` (max-subtraction form)."""
    a = as_node(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return Node(s, (a,), "softmax", vjp, _validate=False)


def sum_all(a) -> Node:
    a = as_node(a)
    shape = a.value.shape
    return Node(
        a.value.sum(), (a,), "sum", lambda g: (np.broadcast_to(g, shape),),
        _validate=False,
    )


def mean_all(a) -> Node:
    a = as_node(a)
    return scale(sum_all(a), 1.0 / a.value.size)


def sum_axis(a, axis: int) -> Node:
    """Sum along one axis, keeping the reduced axis with length 1."""
    a = as_node(a)
    shape = a.value.shape
    return Node(
        a.value.sum(axis=axis, keepdims=True),
        (a,),
        "sum_axis",
        lambda g: (np.broadcast_to(g, shape),),
        _validate=False,
    )


def transpose_last(a) -> Node:
    a = as_node(a)
    return Node(
        np.swapaxes(a.value, -1, -2),
        (a,),
        "transpose",
        lambda g: (np.swapaxes(g, -1, -2),),
        _validate=False,
    )


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.value.shape
    return Node(
        a.value.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),),
        _validate=False,
    )


def take_step(a, index: int, axis: int = -2) -> Node:
    """Select one index along ``axis``, dropping that axis (sequence step)."""
    a = as_node(a)
    ax = axis % a.value.ndim
    sl = (slice(None),) * ax + (index,)

    def vjp(g):
        out = np.zeros_like(a.value)
        out[sl] = g
        return (out,)

    return Node(a.value[sl], (a,), "take", vjp, _validate=False)


def narrow(a, axis: int, start: int, length: int) -> Node:
    """Contiguous slice of ``length`` entries along ``axis``."""
    a = as_node(a)
    ax = axis % a.value.ndim
    sl = (slice(None),) * ax + (slice(start, start + length),)

    def vjp(g):
        out = np.zeros_like(a.value)
        out[sl] = g
        return (out,)

    return Node(a.value[sl], (a,), "narrow", vjp, _validate=False)


def concat(nodes, axis: int = -1) -> Node:
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise ShapeError("concat requires at least one node")
    value = np.concatenate([n.value for n in nodes], axis=axis)
    ax = axis % value.ndim
    sizes = [n.value.shape[ax] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            g[(slice(None),) * ax + (slice(offsets[i], offsets[i + 1]),)]
            for i in range(len(nodes))
        )

    return Node(value, tuple(nodes), "concat", vjp, _validate=False)


def stack(nodes, axis: int = -2) -> Node:
    """Stack equal-shape nodes along a new axis (sequence assembly)."""
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise ShapeError("stack requires at least one node")
    value = np.stack([n.value for n in nodes], axis=axis)
    ax = axis % value.ndim

    def vjp(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(nodes)))

    return Node(value, tuple(nodes), "stack", vjp, _validate=False)


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``grad`` of every node reachable from
    ``loss``. The loss must be scalar (size 1)."""
    if loss.value.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")

    order: list[Node] = []
    seen: set[int] = set()
    stack_: list[tuple[Node, bool]] = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack_.append((p, False))

    # pass-local adjoints keep repeated backward calls independent, so the
    # persistent .grad slots accumulate one full pass per call
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        node.grad += g
        if node._vjp is None:
            continue
        for parent, gp in zip(node.parents, node._vjp(g)):
            if gp is None:
                continue
            acc = adjoint.get(id(parent))
            adjoint[id(parent)] = gp if acc is None else acc + gp
