"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

The graph is built dynamically: every primitive returns a :class:`Node` that
remembers its parents and a closure computing vector-Jacobian products.
Nodes that do not depend on any differentiable leaf are recorded as plain
constants (no parents), so evaluating a model on constant inputs costs no
graph memory.

Gradients accumulate into leaf ``.grad`` buffers across calls to
:func:`backward` until :func:`zero_grad` is called.  Intermediate gradients
live only for the duration of a backward pass.

Broadcasting is deliberately absent except for scalar-times-array in
:func:`mul`; use :func:`broadcast_rows` to tile a vector explicitly.
"""

from __future__ import annotations

import contextlib
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Node", "ShapeError", "BackwardStats", "leaf", "const", "as_node", "backward", "zero_grad",
    "scope", "add", "sub", "neg", "scale", "mul", "matvec", "matmul", "transpose", "reshape",
    "broadcast_rows", "sum", "mean", "square", "sqrt", "tanh", "sin", "cos", "exp",
    "softplus", "concat", "take", "linop", "sqnorm", "fd_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


_local = threading.local()


def _current_scope() -> str | None:
    return getattr(_local, "scope", None)


@contextlib.contextmanager
def scope(name: str):
    """Tag every node created inside the block with ``name``.

    Backward passes report how many rules they applied per scope, which is
    how solvers prove they did (or did not) differentiate through a model.
    """
    prev = _current_scope()
    _local.scope = name
    try:
        yield
    finally:
        _local.scope = prev


class Node:
    __slots__ = ("value", "op", "parents", "grad", "requires_grad", "_vjp", "scope")

    def __init__(self, value, op: str = "leaf", parents: tuple = (), vjp=None,
                 requires_grad: bool = False):
        self.value = value
        self.op = op
        self.parents = parents
        self._vjp = vjp
        self.requires_grad = requires_grad
        self.grad = None
        self.scope = _current_scope()

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = as_node(other)
        if other.value.ndim == 1:
            return matvec(self, other)
        return matmul(self, other)


def _array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def leaf(value, requires_grad: bool = True) -> Node:
    """A differentiable input (or a frozen one with ``requires_grad=False``)."""
    node = Node(_array(value), requires_grad=requires_grad)
    if requires_grad:
        node.grad = np.zeros(node.shape)
    return node


def const(value) -> Node:
    return Node(_array(value))


def as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _make(op: str, value: np.ndarray, parents: Sequence[Node], vjp: Callable) -> Node:
    value = np.asarray(value, dtype=np.float64)
    value.flags.writeable = False
    if any(p.requires_grad for p in parents):
        return Node(value, op, tuple(parents), vjp, requires_grad=True)
    return Node(value, op)


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _same_shape("add", a, b)
    return _make("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _same_shape("sub", a, b)
    return _make("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def neg(a) -> Node:
    a = as_node(a)
    return _make("neg", -a.value, (a,), lambda g: (-g,))


def scale(a, c: float) -> Node:
    """Multiply by a python constant."""
    a = as_node(a)
    c = float(c)
    return _make("scale", c * a.value, (a,), lambda g: (c * g,))


def mul(a, b) -> Node:
    """Elementwise product; one operand may be a 0-d scalar node."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        return _make("mul", av * bv, (a, b), lambda g: (g * bv, g * av))
    if av.ndim == 0:
        return _make("mul", av * bv, (a, b), lambda g: (np.sum(g * bv), g * av))
    if bv.ndim == 0:
        return _make("mul", av * bv, (a, b), lambda g: (g * bv, np.sum(g * av)))
    raise ShapeError(f"mul: shape mismatch {av.shape} vs {bv.shape}")


def matvec(A, x) -> Node:
    A, x = as_node(A), as_node(x)
    Av, xv = A.value, x.value
    if Av.ndim != 2 or xv.ndim != 1 or Av.shape[1] != xv.shape[0]:
        raise ShapeError(f"matvec: shape mismatch {Av.shape} vs {xv.shape}")
    return _make("matvec", Av @ xv, (A, x), lambda g: (
        np.outer(g, xv) if A.requires_grad else None,
        Av.T @ g if x.requires_grad else None,
    ))


def matmul(A, B) -> Node:
    A, B = as_node(A), as_node(B)
    Av, Bv = A.value, B.value
    if Av.ndim != 2 or Bv.ndim != 2 or Av.shape[1] != Bv.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {Av.shape} vs {Bv.shape}")
    return _make("matmul", Av @ Bv, (A, B), lambda g: (
        g @ Bv.T if A.requires_grad else None,
        Av.T @ g if B.requires_grad else None,
    ))


def transpose(a) -> Node:
    a = as_node(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make("transpose", a.value.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Node:
    a = as_node(a)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.value.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _make("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def broadcast_rows(v, rows: int) -> Node:
    """Stack a vector ``rows`` times into a ``(rows, n)`` matrix."""
    v = as_node(v)
    if v.value.ndim != 1:
        raise ShapeError(f"broadcast_rows: expected a vector, got shape {v.shape}")
    out = np.broadcast_to(v.value, (rows, v.value.shape[0])).copy()
    return _make("broadcast_rows", out, (v,), lambda g: (g.sum(axis=0),))


def sum(a) -> Node:  # noqa: A001 - mirrors numpy naming
    a = as_node(a)
    shape = a.shape
    return _make("sum", np.sum(a.value), (a,), lambda g: (np.full(shape, g),))


def mean(a) -> Node:
    a = as_node(a)
    shape, n = a.shape, a.value.size
    return _make("mean", np.mean(a.value), (a,), lambda g: (np.full(shape, g / n),))


def square(a) -> Node:
    a = as_node(a)
    av = a.value
    return _make("square", av * av, (a,), lambda g: (2.0 * av * g,))


def sqrt(a) -> Node:
    a = as_node(a)
    out = np.sqrt(a.value)
    return _make("sqrt", out, (a,), lambda g: (g / (2.0 * out),))


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sin(a) -> Node:
    a = as_node(a)
    av = a.value
    return _make("sin", np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a) -> Node:
    a = as_node(a)
    av = a.value
    return _make("cos", np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make("exp", out, (a,), lambda g: (g * out,))


def softplus(a) -> Node:
    """Smooth relu, log(1 + e^x), evaluated stably."""
    a = as_node(a)
    av = a.value
    out = np.logaddexp(0.0, av)
    sig = np.exp(av - out)
    return _make("softplus", out, (a,), lambda g: (g * sig,))


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise ShapeError("concat: no operands")
    vals = [n.value for n in nodes]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shape mismatch {[v.shape for v in vals]} on axis {axis}") from None
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _make("concat", out, nodes, lambda g: tuple(np.split(g, splits, axis=axis)))


def take(a, index) -> Node:
    """Select entries with a numpy index (slice, integer array, mask)."""
    a = as_node(a)
    shape = a.shape
    out = a.value[index]

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make("take", out, (a,), vjp)


def linop(a, forward: Callable[[np.ndarray], np.ndarray],
          adjoint: Callable[[np.ndarray], np.ndarray], name: str = "linop") -> Node:
    """Apply a fixed linear map given as a forward/adjoint pair of array functions."""
    a = as_node(a)
    return _make(name, forward(a.value), (a,), lambda g: (adjoint(g),))


def sqnorm(a) -> Node:
    """Squared Euclidean norm of all entries."""
    a = as_node(a)
    av = a.value
    return _make("sqnorm", np.sum(av * av), (a,), lambda g: (2.0 * g * av,))


# ---------------------------------------------------------------------------
# backward


@dataclass
class BackwardStats:
    rules_applied: int = 0
    by_scope: Counter = field(default_factory=Counter)


def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> BackwardStats:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``.grad``.

    Repeated calls add to existing leaf gradients; call :func:`zero_grad`
    between independent evaluations.
    """
    if root.value.ndim != 0:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    stats = BackwardStats()
    if not root.requires_grad:
        return stats
    grads = {id(root): np.ones(())}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = node.grad + g
            continue
        stats.rules_applied += 1
        stats.by_scope[node.scope] += 1
        if g is None:
            continue
        for p, pg in zip(node.parents, node._vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(p.shape)
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    return stats


def zero_grad(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n.grad = np.zeros(n.shape)


# ---------------------------------------------------------------------------
# finite-difference check


def fd_check(f: Callable[[Node], Node], x, eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences of ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    xl = leaf(x)
    out = f(xl)
    backward(out)
    g_ad = xl.grad.ravel()
    g_fd = np.empty(x.size)
    flat = x.ravel()
    for i in range(x.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += eps
        xm[i] -= eps
        fp = float(f(const(xp.reshape(x.shape))).value)
        fm = float(f(const(xm.reshape(x.shape))).value)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"fd_check: non-finite function value at coordinate {i}")
        g_fd[i] = (fp - fm) / (2.0 * eps)
    return float(np.max(np.abs(g_ad - g_fd) / (np.abs(g_fd) + 1e-12)))
