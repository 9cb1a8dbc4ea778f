"""Tape-based reverse-mode automatic differentiation on dense float64 arrays.

A :class:`Tape` is an append-only list of nodes. Every operation records its
forward value immediately; :meth:`Tape.backward` sweeps the nodes in strictly
decreasing index order and accumulates adjoints.

Arrays carry an optional leading batch axis (one row per Monte Carlo path).
There is no general broadcasting: the only ops that combine operands of
different shapes are ``affine`` (bias added to every row), ``scale_rows``
and ``expand``, and each states its shape contract explicitly.

The module-level helpers (:func:`relu`, :func:`rowdot`, ...) dispatch on their
argument: given plain ``ndarray`` inputs they compute with numpy directly, so
the same model code runs both on and off the tape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    pass


@dataclass
class _Op:
    forward: Callable
    backward: Callable
    check: Callable


def _same(name):
    def check(shapes, attrs):
        a, b = shapes
        if a != b:
            raise ShapeError(f"{name}: operand shapes differ: {a} vs {b}")
    return check


def _unary(shapes, attrs):
    pass


def _check_matmul(shapes, attrs):
    a, b = shapes
    if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
        raise ShapeError(f"matmul: cannot multiply {a} by {b}")


def _check_matvec(shapes, attrs):
    a, b = shapes
    if len(a) != 2 or len(b) != 1 or a[1] != b[0]:
        raise ShapeError(f"matvec: cannot apply matrix {a} to vector {b}")


def _check_dot(shapes, attrs):
    a, b = shapes
    if len(a) != 1 or a != b:
        raise ShapeError(f"dot: need equal-length vectors, got {a} and {b}")


def _check_rowdot(shapes, attrs):
    a, b = shapes
    if len(a) != 2 or a != b:
        raise ShapeError(f"rowdot: need equal (M, q) operands, got {a} and {b}")


def _check_affine(shapes, attrs):
    x, w, b = shapes
    if len(w) != 2 or len(b) != 1 or w[0] != b[0]:
        raise ShapeError(f"affine: weight {w} and bias {b} do not conform")
    if len(x) not in (1, 2) or x[-1] != w[1]:
        raise ShapeError(f"affine: input {x} does not conform to weight {w}")


def _check_scale_rows(shapes, attrs):
    x, s = shapes
    if len(x) != 2 or s != (x[0],):
        raise ShapeError(f"scale_rows: rows {x} and scales {s} do not conform")


def _check_expand(shapes, attrs):
    (s,) = shapes
    if s != ():
        raise ShapeError(f"expand: operand must be scalar, got {s}")


def _check_rows(shapes, attrs):
    (x,) = shapes
    if len(x) < 1:
        raise ShapeError("rows: operand has no leading axis")


def _sum_backward(g, vals, out, axis=None):
    (a,) = vals
    if axis is None:
        return (np.broadcast_to(g, a.shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)


def _rows_backward(g, vals, out, start, stop):
    (a,) = vals
    full = np.zeros_like(a)
    full[start:stop] = g
    return (full,)


def _affine_backward(g, vals, out):
    x, w, b = vals
    if x.ndim == 1:
        return g @ w, np.outer(g, x), g
    return g @ w, g.T @ x, g.sum(axis=0)


OPS: dict[str, _Op] = {
    "add": _Op(lambda a, b: a + b, lambda g, v, o: (g, g), _same("add")),
    "sub": _Op(lambda a, b: a - b, lambda g, v, o: (g, -g), _same("sub")),
    "mul": _Op(lambda a, b: a * b, lambda g, v, o: (g * v[1], g * v[0]), _same("mul")),
    "scale": _Op(lambda a, c: c * a, lambda g, v, o, c: (c * g,), _unary),
    "matmul": _Op(lambda a, b: a @ b, lambda g, v, o: (g @ v[1].T, v[0].T @ g), _check_matmul),
    "matvec": _Op(lambda a, x: a @ x, lambda g, v, o: (np.outer(g, v[1]), v[0].T @ g), _check_matvec),
    "dot": _Op(lambda a, b: np.dot(a, b), lambda g, v, o: (g * v[1], g * v[0]), _check_dot),
    "rowdot": _Op(
        lambda a, b: np.einsum("mi,mi->m", a, b),
        lambda g, v, o: (g[:, None] * v[1], g[:, None] * v[0]),
        _check_rowdot,
    ),
    # relu'(0) := 0
    "relu": _Op(lambda a: np.maximum(a, 0.0), lambda g, v, o: (g * (v[0] > 0.0),), _unary),
    "square": _Op(lambda a: a * a, lambda g, v, o: (2.0 * g * v[0],), _unary),
    "sin": _Op(np.sin, lambda g, v, o: (g * np.cos(v[0]),), _unary),
    "sum": _Op(lambda a, axis=None: np.sum(a, axis=axis), _sum_backward, _unary),
    "mean": _Op(lambda a: np.mean(a), lambda g, v, o: (np.full(v[0].shape, g / v[0].size),), _unary),
    "affine": _Op(lambda x, w, b: x @ w.T + b, _affine_backward, _check_affine),
    "scale_rows": _Op(
        lambda x, s: x * s[:, None],
        lambda g, v, o: (g * v[1][:, None], np.einsum("mi,mi->m", g, v[0])),
        _check_scale_rows,
    ),
    "expand": _Op(lambda s, n: np.full(n, s), lambda g, v, o, n: (np.sum(g),), _check_expand),
    "rows": _Op(lambda a, start, stop: a[start:stop], _rows_backward, _check_rows),
}


@dataclass
class _Node:
    op: str | None
    parents: tuple[int, ...]
    value: np.ndarray
    attrs: dict
    requires_grad: bool


@dataclass
class Tape:
    nodes: list[_Node] = field(default_factory=list)

    def __len__(self):
        return len(self.nodes)

    def _append(self, node: _Node) -> "Var":
        node.value.flags.writeable = False
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, requires_grad: bool = True) -> "Var":
        value = np.array(value, dtype=np.float64)
        return self._append(_Node(None, (), value, {}, requires_grad))

    def const(self, value) -> "Var":
        return self.leaf(value, requires_grad=False)

    def _lift(self, x) -> "Var":
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("operand belongs to a different tape")
            return x
        return self.const(x)

    def record(self, op: str, *operands, **attrs) -> "Var":
        spec = OPS[op]
        refs = [self._lift(x) for x in operands]
        vals = [self.nodes[r.index].value for r in refs]
        spec.check([v.shape for v in vals], attrs)
        out = np.asarray(spec.forward(*vals, **attrs), dtype=np.float64)
        needs = any(self.nodes[r.index].requires_grad for r in refs)
        return self._append(_Node(op, tuple(r.index for r in refs), out, attrs, needs))

    def backward(self, root: "Var") -> dict[int, np.ndarray]:
        """Adjoints of ``root`` w.r.t. every node that influences it."""
        if root.shape != ():
            raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
        adj: dict[int, np.ndarray] = {root.index: np.array(1.0)}
        for i in range(root.index, -1, -1):
            g = adj.get(i)
            node = self.nodes[i]
            if g is None or node.op is None or not node.requires_grad:
                continue
            vals = [self.nodes[p].value for p in node.parents]
            grads = OPS[node.op].backward(g, vals, node.value, **node.attrs)
            for p, gp in zip(node.parents, grads):
                if not self.nodes[p].requires_grad:
                    continue
                adj[p] = gp if p not in adj else adj[p] + gp
        return adj


class Var:
    """Handle to a node on a :class:`Tape`."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # make numpy defer to the reflected operators below

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"

    def __add__(self, other):
        return self.tape.record("add", self, other)

    def __radd__(self, other):
        return self.tape.record("add", other, self)

    def __sub__(self, other):
        return self.tape.record("sub", self, other)

    def __rsub__(self, other):
        return self.tape.record("sub", other, self)

    def __neg__(self):
        return self.tape.record("scale", self, c=-1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.record("scale", self, c=float(other))
        return self.tape.record("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("Var division is only defined by a scalar constant")
        return self.tape.record("scale", self, c=1.0 / float(other))

    def __matmul__(self, other):
        op = "matvec" if np.ndim(_raw(other)) == 1 else "matmul"
        return self.tape.record(op, self, other)

    def __rmatmul__(self, other):
        op = "matvec" if len(self.shape) == 1 else "matmul"
        return self.tape.record(op, other, self)


def _raw(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def relu(x):
    t = _tape_of(x)
    return t.record("relu", x) if t else np.maximum(x, 0.0)


def sin(x):
    t = _tape_of(x)
    return t.record("sin", x) if t else np.sin(x)


def square(x):
    t = _tape_of(x)
    return t.record("square", x) if t else x * x


def total(x, axis=None):
    t = _tape_of(x)
    return t.record("sum", x, axis=axis) if t else np.sum(x, axis=axis)


def mean(x):
    t = _tape_of(x)
    return t.record("mean", x) if t else np.mean(x)


def dot(a, b):
    t = _tape_of(a, b)
    return t.record("dot", a, b) if t else np.dot(a, b)


def rowdot(a, b):
    """Row-wise inner product of two (M, q) arrays."""
    t = _tape_of(a, b)
    return t.record("rowdot", a, b) if t else np.einsum("mi,mi->m", a, b)


def affine(x, w, b):
    """``x @ w.T + b`` with the bias added to every row of ``x``."""
    t = _tape_of(x, w, b)
    return t.record("affine", x, w, b) if t else x @ w.T + b


def scale_rows(x, s):
    t = _tape_of(x, s)
    return t.record("scale_rows", x, s) if t else x * s[:, None]


def expand(s, n: int):
    t = _tape_of(s)
    return t.record("expand", s, n=n) if t else np.full(n, float(s))


def rows(x, start: int, stop: int):
    t = _tape_of(x)
    return t.record("rows", x, start=start, stop=stop) if t else x[start:stop]


def value(x) -> np.ndarray:
    """Numeric payload of ``x`` whether it is a Var or already an array."""
    return np.asarray(_raw(x))


def grad_check(f: Callable[[Tape, Var], Var], x, eps: float = 1e-6) -> float:
    """Max relative gap between tape adjoints and central differences.

    ``f`` builds a scalar on the tape it is handed, from the leaf it is handed.
    """
    if not 1e-8 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-8, 1e-3]")
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    leaf = tape.leaf(x)
    out = f(tape, leaf)
    adjoint = tape.backward(out).get(leaf.index, np.zeros_like(x))

    def evaluate(point):
        t = Tape()
        return float(f(t, t.leaf(point)).value)

    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += eps
        down[i] -= eps
        fd = (evaluate(up.reshape(x.shape)) - evaluate(down.reshape(x.shape))) / (2 * eps)
        gap = abs(adjoint.reshape(-1)[i] - fd) / (abs(fd) + 1e-12)
        worst = max(worst, gap)
    return worst
