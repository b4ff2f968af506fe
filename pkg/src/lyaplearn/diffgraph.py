"""Tape-based reverse-mode differentiation over scalars and small numpy arrays.

A :class:`Graph` records every :class:`Node` created during one forward
evaluation in creation order, which is already a topological order.  A single
call to :meth:`Graph.backward` sweeps the tape in reverse and leaves
``node.adjoint`` equal to the derivative of the root with respect to that node.

Nodes may hold a Python float or a 1-D/2-D ``numpy`` array; elementwise
operations broadcast like numpy and reduce adjoints back to the input shape.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DiffError",
    "EvaluationError",
    "GraphStateError",
    "Graph",
    "Node",
    "grad_check",
    "softplus_value",
    "sigmoid_value",
]

SOFTPLUS_CUTOFF = 30.0


class DiffError(Exception):
    """Base class for differentiation engine errors."""


class EvaluationError(DiffError, ValueError):
    """A forward evaluation left the domain of an operation."""


class GraphStateError(DiffError, RuntimeError):
    """The graph was used in an order it does not support."""


def sigmoid_value(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus_value(x):
    """ln(1 + e^x) with the linear/exponential tails taken past |x| > 30."""
    if np.ndim(x) == 0:
        x = float(x)
        if x > SOFTPLUS_CUTOFF:
            return x
        if x < -SOFTPLUS_CUTOFF:
            return math.exp(x)
        return math.log1p(math.exp(x))
    x = np.asarray(x, dtype=float)
    mid = np.clip(x, -SOFTPLUS_CUTOFF, SOFTPLUS_CUTOFF)
    out = np.log1p(np.exp(mid))
    out = np.where(x > SOFTPLUS_CUTOFF, x, out)
    return np.where(x < -SOFTPLUS_CUTOFF, np.exp(np.minimum(x, 0.0)), out)


def _unbroadcast(grad, like):
    """Sum ``grad`` down to the shape of ``like`` (float or ndarray)."""
    if type(like) is not np.ndarray:
        if type(grad) is not np.ndarray:
            return grad
        return float(grad.sum())
    if type(grad) is not np.ndarray:
        return np.full(like.shape, float(grad))
    if grad.shape == like.shape:
        return grad
    while grad.ndim > like.ndim:
        grad = grad.sum(axis=0)
    for axis, size in enumerate(like.shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Node:
    """One recorded value on a :class:`Graph`."""

    __slots__ = ("graph", "index", "value", "adjoint", "op", "inputs", "_backward", "is_param")

    def __init__(self, graph, index, value, op, inputs, backward, is_param=False):
        self.graph = graph
        self.index = index
        self.value = value
        # adjoints start as the scalar 0.0 and broadcast up on first accumulation
        self.adjoint = 0.0
        self.op = op
        self.inputs = inputs
        self._backward = backward
        self.is_param = is_param

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node(#{self.index} {self.op}, value={self.value!r})"

    def __float__(self):
        return float(self.value)

    # operator sugar, everything routes through the owning graph
    def __add__(self, other):
        return self.graph.add(self, other)

    def __radd__(self, other):
        return self.graph.add(other, self)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __rsub__(self, other):
        return self.graph.sub(other, self)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    def __rmul__(self, other):
        return self.graph.mul(other, self)

    def __truediv__(self, other):
        return self.graph.div(self, other)

    def __rtruediv__(self, other):
        return self.graph.div(other, self)

    def __neg__(self):
        return self.graph.neg(self)

    def __pow__(self, exponent):
        return self.graph.pow(self, exponent)

    def __matmul__(self, other):
        return self.graph.matvec(self, other)

    def __getitem__(self, i):
        return self.graph.index(self, i)


class Graph:
    """Record of the nodes created during one forward evaluation.

    Not thread-safe; build one graph per control period and discard it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._backward_done = False

    def __len__(self):
        return len(self.nodes)

    def reset(self):
        """Drop every recorded node so the graph can be reused."""
        self.nodes = []
        self._backward_done = False

    # -- leaves -------------------------------------------------------------
    def _record(self, value, op, inputs=(), backward=None, is_param=False):
        if self._backward_done:
            raise GraphStateError("graph already differentiated; reset() before recording")
        nodes = self.nodes
        node = Node(self, len(nodes), value, op, inputs, backward, is_param)
        nodes.append(node)
        return node

    def lift(self, c) -> Node:
        """A constant: gradients never flow out of it."""
        if isinstance(c, Node):
            if c.graph is not self:
                raise GraphStateError(f"{c!r} belongs to a different graph")
            return c
        if isinstance(c, np.ndarray):
            return self._record(np.array(c, dtype=float), "const")
        return self._record(float(c), "const")

    def _lift2(self, a, b):
        # inlined fast path of lift() for the binary ops
        if type(a) is Node and a.graph is self:
            pass
        else:
            a = self.lift(a)
        if type(b) is Node and b.graph is self:
            return a, b
        return a, self.lift(b)

    def param(self, value, name: str | None = None) -> Node:
        """A leaf whose adjoint is reported by :meth:`backward`."""
        if isinstance(value, np.ndarray):
            value = np.array(value, dtype=float)
        else:
            value = float(value)
        return self._record(value, name or "param", is_param=True)

    def _check(self, node, what):
        v = node.value
        if not np.all(np.isfinite(v)):
            raise EvaluationError(f"{what} produced a non-finite value at node #{node.index}")
        return node

    # -- binary elementwise -------------------------------------------------
    def add(self, a, b) -> Node:
        a, b = self._lift2(a, b)

        def back(g, a=a, b=b):
            a.adjoint = a.adjoint + _unbroadcast(g, a.value)
            b.adjoint = b.adjoint + _unbroadcast(g, b.value)

        return self._record(a.value + b.value, "add", (a, b), back)

    def sub(self, a, b) -> Node:
        a, b = self._lift2(a, b)

        def back(g, a=a, b=b):
            a.adjoint = a.adjoint + _unbroadcast(g, a.value)
            b.adjoint = b.adjoint - _unbroadcast(g, b.value)

        return self._record(a.value - b.value, "sub", (a, b), back)

    def mul(self, a, b) -> Node:
        a, b = self._lift2(a, b)

        def back(g, a=a, b=b):
            a.adjoint = a.adjoint + _unbroadcast(g * b.value, a.value)
            b.adjoint = b.adjoint + _unbroadcast(g * a.value, b.value)

        return self._record(a.value * b.value, "mul", (a, b), back)

    def div(self, a, b) -> Node:
        a, b = self._lift2(a, b)
        if np.any(np.asarray(b.value) == 0):
            raise EvaluationError(f"division by zero (denominator node #{b.index})")
        value = a.value / b.value

        def back(g, a=a, b=b):
            a.adjoint = a.adjoint + _unbroadcast(g / b.value, a.value)
            b.adjoint = b.adjoint - _unbroadcast(g * a.value / (b.value * b.value), b.value)

        return self._record(value, "div", (a, b), back)

    # -- unary elementwise --------------------------------------------------
    def _unary(self, a, op, value, local):
        """Record ``value = f(a)`` whose derivative is ``local(a_value, value)``."""
        a = self.lift(a)

        def back(g, a=a):
            a.adjoint = a.adjoint + g * local(a.value, node.value)

        node = self._record(value, op, (a,), back)
        return node

    def neg(self, a) -> Node:
        a = self.lift(a)
        return self._unary(a, "neg", -a.value, lambda x, y: -1.0)

    def exp(self, a) -> Node:
        a = self.lift(a)
        with np.errstate(over="ignore"):
            node = self._unary(a, "exp", np.exp(a.value), lambda x, y: y)
        return self._check(node, "exp")

    def ln(self, a) -> Node:
        a = self.lift(a)
        if np.any(np.asarray(a.value) <= 0):
            raise EvaluationError(f"ln of non-positive value at node #{a.index}")
        return self._unary(a, "ln", np.log(a.value), lambda x, y: 1.0 / x)

    def tanh(self, a) -> Node:
        a = self.lift(a)
        return self._unary(a, "tanh", np.tanh(a.value), lambda x, y: 1.0 - y * y)

    def sigmoid(self, a) -> Node:
        a = self.lift(a)
        return self._unary(a, "sigmoid", sigmoid_value(a.value), lambda x, y: y * (1.0 - y))

    def relu(self, a) -> Node:
        a = self.lift(a)
        # relu'(0) = 0
        return self._unary(a, "relu", np.maximum(a.value, 0.0), lambda x, y: (np.asarray(x) > 0) * 1.0)

    def softplus(self, a) -> Node:
        a = self.lift(a)
        return self._unary(a, "softplus", softplus_value(a.value), lambda x, y: sigmoid_value(x))

    def abs(self, a) -> Node:
        a = self.lift(a)
        return self._unary(a, "abs", np.abs(a.value), lambda x, y: np.sign(x))

    def sin(self, a) -> Node:
        a = self.lift(a)
        return self._unary(a, "sin", np.sin(a.value), lambda x, y: np.cos(x))

    def cos(self, a) -> Node:
        a = self.lift(a)
        return self._unary(a, "cos", np.cos(a.value), lambda x, y: -np.sin(x))

    def pow(self, a, exponent: float) -> Node:
        """``a ** exponent`` for a constant real exponent."""
        if isinstance(exponent, Node):
            raise TypeError("pow supports constant exponents only")
        a = self.lift(a)
        p = float(exponent)
        if p != int(p) and np.any(np.asarray(a.value) < 0):
            raise EvaluationError(f"non-integer power of negative value at node #{a.index}")
        if p < 0 and np.any(np.asarray(a.value) == 0):
            raise EvaluationError(f"negative power of zero at node #{a.index}")
        if p == 1.0:
            return self._unary(a, "pow", a.value * 1.0, lambda x, y: 1.0)
        return self._unary(a, "pow", a.value ** p, lambda x, y: p * x ** (p - 1.0))

    def elementwise(self, op: str, *inputs, **kwargs) -> Node:
        """Dispatch by operation name, e.g. ``g.elementwise("softplus", x)``."""
        fn = getattr(self, op, None)
        if op not in _ELEMENTWISE or fn is None:
            raise ValueError(f"unknown elementwise op {op!r}")
        return fn(*inputs, **kwargs)

    # -- structural / linear algebra ----------------------------------------
    def dot(self, a, b) -> Node:
        """Inner product of two equal-length vectors.

        Either argument may be a :class:`Node` holding a vector, or a
        sequence of scalar nodes/numbers.
        """
        if not isinstance(a, Node) and isinstance(a, (list, tuple)):
            if not isinstance(b, Node) and len(a) != len(b):
                raise ValueError(f"dot length mismatch: {len(a)} vs {len(b)}")
            return self.sum_of(self.mul(ai, bi) for ai, bi in zip(a, b))
        a, b = self.lift(a), self.lift(b)
        if np.shape(a.value) != np.shape(b.value) or np.ndim(a.value) != 1:
            raise ValueError(f"dot length mismatch: {np.shape(a.value)} vs {np.shape(b.value)}")

        def back(g, a=a, b=b):
            a.adjoint = a.adjoint + g * b.value
            b.adjoint = b.adjoint + g * a.value

        return self._record(float(np.dot(a.value, b.value)), "dot", (a, b), back)

    def matvec(self, W, x) -> Node:
        W, x = self.lift(W), self.lift(x)
        if np.ndim(W.value) != 2 or np.ndim(x.value) != 1 or W.value.shape[1] != x.value.shape[0]:
            raise ValueError(f"matvec shape mismatch: {np.shape(W.value)} @ {np.shape(x.value)}")

        def back(g, W=W, x=x):
            W.adjoint = W.adjoint + np.outer(g, x.value)
            x.adjoint = x.adjoint + W.value.T @ g

        return self._record(W.value @ x.value, "matvec", (W, x), back)

    def sum(self, a) -> Node:
        a = self.lift(a)

        def back(g, a=a):
            a.adjoint = a.adjoint + g * np.ones_like(a.value)

        return self._record(float(np.sum(a.value)), "sum", (a,), back)

    def sum_of(self, terms: Iterable) -> Node:
        terms = [self.lift(t) for t in terms]
        if not terms:
            return self.lift(0.0)
        total = terms[0]
        for t in terms[1:]:
            total = self.add(total, t)
        return total

    def index(self, a, i: int) -> Node:
        a = self.lift(a)

        def back(g, a=a, i=i):
            if type(a.adjoint) is not np.ndarray:
                a.adjoint = np.full(a.value.shape, float(a.adjoint))
            else:
                a.adjoint = a.adjoint.copy()
            a.adjoint[i] += g

        value = a.value[i]
        if isinstance(value, np.ndarray):
            value = np.array(value, dtype=float)
        else:
            value = float(value)
        return self._record(value, "index", (a,), back)

    def stack(self, items: Sequence) -> Node:
        items = [self.lift(v) for v in items]
        for v in items:
            if np.ndim(v.value) != 0:
                raise ValueError("stack expects scalar nodes")

        def back(g, items=items):
            for j, v in enumerate(items):
                v.adjoint = v.adjoint + float(g[j])

        return self._record(np.array([v.value for v in items], dtype=float), "stack", items, back)

    # -- reverse sweep ------------------------------------------------------
    def backward(self, root: Node) -> dict[Node, object]:
        """Propagate d(root)/d(node) into every node's adjoint.

        Returns a mapping from each parameter node to its gradient.  A second
        call without :meth:`reset` raises :class:`GraphStateError`.
        """
        if root.graph is not self:
            raise GraphStateError("root does not belong to this graph")
        if np.ndim(root.value) != 0:
            raise ValueError(f"backward needs a scalar root, got shape {np.shape(root.value)}")
        if self._backward_done:
            raise GraphStateError("backward already ran on this graph; call reset() first")
        self._backward_done = True
        root.adjoint = 1.0
        for node in reversed(self.nodes[: root.index + 1]):
            if node._backward is None:
                continue
            g = node.adjoint
            if isinstance(g, np.ndarray):
                if not g.any():
                    continue
            elif g == 0.0:
                continue
            node._backward(g)
        out = {}
        for n in self.nodes:
            if n.is_param:
                if type(n.value) is np.ndarray and type(n.adjoint) is not np.ndarray:
                    n.adjoint = np.full(n.value.shape, float(n.adjoint))
                out[n] = n.adjoint
        return out


_ELEMENTWISE = frozenset(
    ["add", "sub", "mul", "div", "neg", "exp", "ln", "tanh", "sigmoid", "relu",
     "softplus", "pow", "abs", "sin", "cos"]
)


def grad_check(
    f: Callable[[Graph, Node], Node],
    point,
    h: float = 1e-6,
) -> float:
    """Compare reverse-mode and central-difference gradients of ``f`` at ``point``.

    ``f(graph, theta)`` must build a scalar root from the vector parameter node
    ``theta``.  Returns ``max_i |ad_i - fd_i| / max(1, |fd_i|)``.
    """
    if not h > 0:
        raise ValueError(f"invalid step h={h!r}: must be positive")
    point = np.array(point, dtype=float).ravel()

    g = Graph()
    theta = g.param(point)
    root = f(g, theta)
    if not np.isfinite(root.value):
        raise EvaluationError("function value is not finite at the check point")
    ad = np.asarray(g.backward(root)[theta], dtype=float)

    def value_at(p):
        gg = Graph()
        v = f(gg, gg.param(p)).value
        if not np.isfinite(v):
            raise EvaluationError("function value is not finite at a perturbed point")
        return float(v)

    worst = 0.0
    for i in range(point.size):
        up, dn = point.copy(), point.copy()
        up[i] += h
        dn[i] -= h
        fd = (value_at(up) - value_at(dn)) / (2.0 * h)
        worst = max(worst, abs(ad[i] - fd) / max(1.0, abs(fd)))
    return worst
