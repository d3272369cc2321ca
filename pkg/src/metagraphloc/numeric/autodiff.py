"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Values are numpy arrays. Two-dimensional arrays play the role of matrices;
a leading batch axis is allowed so a whole minibatch of per-sample graphs
can be pushed through one tape. Elementwise ops only broadcast scalars; any
other shape disagreement raises :class:`DimensionError`.

Typical use::

    tape = Tape()
    w = tape.param(w0, name="w")
    x = tape.const(x0)
    loss = tape.mean(tape.square(tape.matmul(x, w)))
    grads = backward(tape, loss)      # {"w": dL/dw}
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .. import kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Operation undefined for the given input (e.g. empty reduction)."""


class ContractError(RuntimeError):
    """API contract violated (e.g. non-scalar loss)."""


def as_matrix(data, *, name: str = "matrix") -> np.ndarray:
    """Validate external input as a finite 2-D float64 matrix."""
    m = np.array(data, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"{name}: expected 2-D data, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DomainError(f"{name}: non-finite entries")
    return m


class Node:
    __slots__ = ("tape", "id", "op", "inputs", "value", "grad", "ctx", "name", "requires_grad")

    def __init__(self, tape, id_, op, inputs, value, ctx=None, name=None, requires_grad=False):
        self.tape = tape
        self.id = id_
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad = None
        self.ctx = ctx
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return self.tape.add(self, other)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __repr__(self):
        return f"Node({self.id}, {self.op}, shape={self.value.shape})"


# op name -> backward(node, upstream_grad) -> tuple of grads per input (None = no grad)
_BACKWARD: dict[str, Callable] = {}


def _register(name):
    def deco(fn):
        _BACKWARD[name] = fn
        return fn
    return deco


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    # undo matmul batch broadcasting
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


_AXES = {"rows": 0, "cols": 1, "all": None}


class Tape:
    """Single-writer record of operations in topological (creation) order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _push(self, op, inputs, value, ctx=None, name=None, requires_grad=None):
        if requires_grad is None:
            requires_grad = any(n.requires_grad for n in inputs)
        node = Node(self, len(self.nodes), op, tuple(inputs), value, ctx, name, requires_grad)
        self.nodes.append(node)
        return node

    def _lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise ContractError("node belongs to a different tape")
            return x
        return self.const(x)

    # leaves
    def param(self, value, name: str | None = None) -> Node:
        return self._push("param", (), np.asarray(value, dtype=np.float64), name=name, requires_grad=True)

    def const(self, value) -> Node:
        return self._push("const", (), np.asarray(value, dtype=np.float64), requires_grad=False)

    # linear algebra
    def matmul(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        if a.value.ndim < 2 or b.value.ndim < 2 or a.value.shape[-1] != b.value.shape[-2]:
            raise DimensionError(f"matmul: {a.value.shape} @ {b.value.shape}")
        return self._push("matmul", (a, b), np.matmul(a.value, b.value))

    # elementwise
    def _binary(self, op, a, b, fn):
        a, b = self._lift(a), self._lift(b)
        sa, sb = a.value.shape, b.value.shape
        if sa != sb and a.value.size != 1 and b.value.size != 1:
            raise DimensionError(f"{op}: shapes {sa} and {sb} differ")
        return self._push(op, (a, b), fn(a.value, b.value))

    def add(self, a, b) -> Node:
        return self._binary("add", a, b, np.add)

    def sub(self, a, b) -> Node:
        return self._binary("sub", a, b, np.subtract)

    def mul(self, a, b) -> Node:
        return self._binary("mul", a, b, np.multiply)

    def add_row(self, a, row) -> Node:
        """a + row where row is a (1, n) bias repeated over every row of a."""
        a, row = self._lift(a), self._lift(row)
        n = a.value.shape[-1]
        if row.value.shape != (1, n):
            raise DimensionError(f"add_row: bias {row.value.shape} vs width {n}")
        return self._push("add_row", (a, row), a.value + row.value)

    def leaky_relu(self, a, eps: float = 0.01) -> Node:
        a = self._lift(a)
        return self._push("leaky_relu", (a,), np.where(a.value >= 0, a.value, eps * a.value), ctx=eps)

    def relu(self, a) -> Node:
        return self.leaky_relu(a, 0.0)

    def square(self, a) -> Node:
        a = self._lift(a)
        return self._push("square", (a,), a.value * a.value)

    # reductions
    def reduce(self, a, kind: str = "sum", axis="all") -> Node:
        a = self._lift(a)
        if a.value.size == 0:
            raise DomainError("reduce: empty input")
        ax = _AXES[axis] if isinstance(axis, str) else axis
        v = a.value
        if kind == "sum":
            out = v.sum() if ax is None else v.sum(axis=ax)
            ctx = (ax, None)
        elif kind == "mean":
            out = v.mean() if ax is None else v.mean(axis=ax)
            ctx = (ax, None)
        elif kind == "max":
            # argmax returns the first maximal index: lowest-index tie-break
            if ax is None:
                arg = int(np.argmax(v))
                out = v.reshape(-1)[arg]
            else:
                arg = np.argmax(v, axis=ax)
                out = np.take_along_axis(v, np.expand_dims(arg, ax), axis=ax).squeeze(ax)
            ctx = (ax, arg)
        else:
            raise ValueError(f"unknown reduction {kind!r}")
        out = np.asarray(out, dtype=np.float64)
        if ax is None:
            out = out.reshape(1, 1)
        elif v.ndim == 2:
            out = out.reshape(1, -1) if ax == 0 else out.reshape(-1, 1)
        return self._push(f"reduce_{kind}", (a,), out, ctx=ctx)

    def sum(self, a) -> Node:
        return self.reduce(a, "sum", "all")

    def mean(self, a) -> Node:
        return self.reduce(a, "mean", "all")

    # shape ops
    def reshape(self, a, shape) -> Node:
        a = self._lift(a)
        return self._push("reshape", (a,), a.value.reshape(shape))

    def concat(self, parts, axis: int = -1) -> Node:
        parts = [self._lift(p) for p in parts]
        vals = [p.value for p in parts]
        try:
            out = np.concatenate(vals, axis=axis)
        except ValueError as exc:
            raise DimensionError(f"concat: {exc}") from None
        sizes = [v.shape[axis] for v in vals]
        return self._push("concat", parts, out, ctx=(axis, sizes))

    def gather_neighbors(self, a, idx: np.ndarray) -> Node:
        """(B, M, C) values, (B, M, k) indices -> (B, M, k, C) with out[b,i,n] = a[b, idx[b,i,n]]."""
        a = self._lift(a)
        if a.value.ndim != 3 or idx.ndim != 3 or idx.shape[:2] != a.value.shape[:2]:
            raise DimensionError(f"gather_neighbors: {a.value.shape} with idx {idx.shape}")
        b = np.arange(a.value.shape[0])[:, None, None]
        return self._push("gather", (a,), a.value[b, idx], ctx=idx)

    def edge_aggregate(self, p, q, idx: np.ndarray, eps: float, kind: str = "max") -> Node:
        """Fused EdgeConv message + aggregation.

        out[b,i,c] = AGG_n leaky(p[b, idx[b,i,n], c] - p[b,i,c] + q[b,i,c])
        """
        p, q = self._lift(p), self._lift(q)
        if p.value.ndim != 3 or p.value.shape != q.value.shape:
            raise DimensionError(f"edge_aggregate: {p.value.shape} vs {q.value.shape}")
        if idx.shape[:2] != p.value.shape[:2] or idx.shape[2] < 1:
            raise DimensionError(f"edge_aggregate: idx {idx.shape}")
        out, arg = kernels.edge_aggregate_forward(p.value, q.value, idx, eps, kind)
        return self._push("edge_aggregate", (p, q), out, ctx=(idx, eps, kind, arg))


@_register("matmul")
def _bw_matmul(node, g):
    a, b = node.inputs
    av, bv = a.value, b.value
    ga = np.matmul(g, np.swapaxes(bv, -1, -2))
    gb = np.matmul(np.swapaxes(av, -1, -2), g)
    return _sum_to_shape(ga, av.shape), _sum_to_shape(gb, bv.shape)


def _scalar_fix(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


@_register("add")
def _bw_add(node, g):
    a, b = node.inputs
    return _scalar_fix(g, a.value.shape), _scalar_fix(g, b.value.shape)


@_register("sub")
def _bw_sub(node, g):
    a, b = node.inputs
    return _scalar_fix(g, a.value.shape), _scalar_fix(-g, b.value.shape)


@_register("mul")
def _bw_mul(node, g):
    a, b = node.inputs
    return _scalar_fix(g * b.value, a.value.shape), _scalar_fix(g * a.value, b.value.shape)


@_register("add_row")
def _bw_add_row(node, g):
    a, row = node.inputs
    return g, g.reshape(-1, g.shape[-1]).sum(axis=0, keepdims=True)


@_register("leaky_relu")
def _bw_leaky(node, g):
    (a,) = node.inputs
    return (np.where(a.value >= 0, g, node.ctx * g),)


@_register("square")
def _bw_square(node, g):
    (a,) = node.inputs
    return (2.0 * a.value * g,)


def _expand_reduced(g, ax, shape):
    if ax is None:
        return np.broadcast_to(g.reshape(()), shape)
    g = g.reshape(shape[:ax] + shape[ax + 1:])
    return np.broadcast_to(np.expand_dims(g, ax), shape)


@_register("reduce_sum")
def _bw_rsum(node, g):
    (a,) = node.inputs
    ax, _ = node.ctx
    return (np.array(_expand_reduced(g, ax, a.value.shape)),)


@_register("reduce_mean")
def _bw_rmean(node, g):
    (a,) = node.inputs
    ax, _ = node.ctx
    n = a.value.size if ax is None else a.value.shape[ax]
    return (np.array(_expand_reduced(g, ax, a.value.shape)) / n,)


@_register("reduce_max")
def _bw_rmax(node, g):
    (a,) = node.inputs
    ax, arg = node.ctx
    out = np.zeros_like(a.value)
    if ax is None:
        out.reshape(-1)[arg] = g.reshape(())
    else:
        shape = a.value.shape
        gg = g.reshape(shape[:ax] + shape[ax + 1:])
        np.put_along_axis(out, np.expand_dims(arg, ax), np.expand_dims(gg, ax), axis=ax)
    return (out,)


@_register("reshape")
def _bw_reshape(node, g):
    (a,) = node.inputs
    return (g.reshape(a.value.shape),)


@_register("concat")
def _bw_concat(node, g):
    axis, sizes = node.ctx
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


@_register("gather")
def _bw_gather(node, g):
    (a,) = node.inputs
    idx = node.ctx
    out = np.zeros_like(a.value)
    b = np.broadcast_to(np.arange(a.value.shape[0])[:, None, None], idx.shape)
    np.add.at(out, (b, idx), g)
    return (out,)


@_register("edge_aggregate")
def _bw_edge(node, g):
    p, q = node.inputs
    idx, eps, kind, arg = node.ctx
    gp, gq = kernels.edge_aggregate_backward(p.value, q.value, idx, eps, kind, arg, np.ascontiguousarray(g))
    return gp, gq


def backward(tape: Tape, loss: Node) -> dict:
    """Populate adjoints and return ``{param name or node id: gradient}``.

    Every ``param`` node on the tape appears in the result, with zeros when the
    loss does not depend on it.
    """
    if loss.tape is not tape:
        raise ContractError("loss node belongs to a different tape")
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar (1x1), got shape {loss.value.shape}")
    for n in tape.nodes:
        n.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes[: loss.id + 1]):
        if node.grad is None or not node.requires_grad or not node.inputs:
            continue
        grads = _BACKWARD[node.op](node, node.grad)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=np.float64).reshape(inp.value.shape)
            inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
    out = {}
    for n in tape.nodes:
        if n.op == "param":
            key = n.name if n.name is not None else n.id
            out[key] = n.grad if n.grad is not None else np.zeros_like(n.value)
    return out
