"""Tape-based reverse-mode differentiation over dense numpy arrays.

Every op appends a record to its :class:`Graph`; :func:`backward` walks the
records in reverse creation order.  Gradient barriers are edge properties:
the forward value is never touched, the backward walk simply refuses to push
an adjoint across a barriered edge (or across the barriered entries of the
two attention products), so blocked gradients are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Tensor",
    "GradientMap",
    "GradCheckReport",
    "backward",
    "grad_check",
    "stop_gradient",
    "matmul",
    "softmax_rows",
    "log_softmax",
    "rmsnorm",
    "swish",
    "embedding_gather",
    "attention_scores",
    "attention_mix",
    "concat",
    "reshape",
    "transpose",
    "slice_axis",
    "sum_all",
    "RMSNORM_EPS",
]

RMSNORM_EPS = 1e-6


@dataclass
class _Record:
    op: str
    inputs: tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    barrier: tuple[bool, ...] = ()


class Graph:
    """Append-only op tape.  One graph per forward pass.

    ``severed`` replays a previous run with every barriered operand frozen at
    its recorded value, which is what finite differences of a function with
    stop-gradients have to differentiate.
    """

    def __init__(self, dtype=np.float64, severed: list[np.ndarray] | None = None):
        self.dtype = np.dtype(dtype)
        self.records: list[_Record] = []
        self.nodes: list[Tensor] = []
        self.barrier_edges: set[tuple[int, int]] = set()
        self.captured: list[np.ndarray] = []
        self._severed = severed
        self._sever_idx = 0

    def tensor(self, values, trainable: bool = False, name: str | None = None) -> "Tensor":
        arr = np.asarray(values, dtype=self.dtype)
        t = Tensor(self, arr, requires_grad=trainable, trainable=trainable, name=name)
        self.records.append(_Record("leaf", (), t.id, None))
        return t

    def constant(self, values) -> "Tensor":
        return self.tensor(values, trainable=False)

    def release(self) -> None:
        """Drop the tape so its activations can be freed without a cycle collection."""
        self.records.clear()
        self.nodes.clear()
        self.captured.clear()

    def _register(self, t: "Tensor") -> int:
        self.nodes.append(t)
        return len(self.nodes) - 1

    def _op(self, op, inputs, value, backward_fn, barrier=None) -> "Tensor":
        barrier = tuple(barrier) if barrier is not None else (False,) * len(inputs)
        req = any(x.requires_grad and not b for x, b in zip(inputs, barrier))
        out = Tensor(self, value, requires_grad=req)
        for x, b in zip(inputs, barrier):
            if x.graph is not self:
                raise ValueError("inputs belong to a different graph")
            if b:
                self.barrier_edges.add((x.id, out.id))
        self.records.append(
            _Record(op, tuple(x.id for x in inputs), out.id, backward_fn if req else None, barrier)
        )
        return out

    def _sever(self, value: np.ndarray) -> np.ndarray:
        """Value a barriered operand takes in this run (frozen under replay)."""
        if self._severed is None:
            self.captured.append(value)
            return value
        frozen = self._severed[self._sever_idx]
        self._sever_idx += 1
        return frozen


class Tensor:
    """A node of a :class:`Graph` holding a dense array."""

    __slots__ = ("graph", "id", "value", "requires_grad", "trainable", "name")
    __array_priority__ = 100

    def __init__(self, graph: Graph, value: np.ndarray, requires_grad=False, trainable=False, name=None):
        self.graph = graph
        self.value = value
        self.requires_grad = requires_grad
        self.trainable = trainable
        self.name = name
        self.id = graph._register(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.shape})"

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return self.graph.constant(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(self._lift(other)))

    def __rsub__(self, other):
        return add(self._lift(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum_all(self)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return a.graph._op(
        "add", (a, b), a.value + b.value, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def neg(a: Tensor) -> Tensor:
    return a.graph._op("neg", (a,), -a.value, lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.value.dtype.type(c)
    return a.graph._op("scale", (a,), a.value * c, lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.value, b.value
    sa, sb = a.shape, b.shape
    return a.graph._op(
        "mul", (a, b), av * bv, lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb))
    )


def swish(x: Tensor) -> Tensor:
    """``x * sigmoid(x)``."""
    xv = x.value
    sig = 0.5 * (1.0 + np.tanh(0.5 * xv))
    return x.graph._op("swish", (x,), xv * sig, lambda g: (g * (sig + xv * sig * (1.0 - sig)),))


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; the edge back to ``x`` is a barrier."""
    value = x.graph._sever(x.value)
    return x.graph._op("stop_gradient", (x,), value.copy(), None, barrier=(True,))


# ------------------------------------------------------------------ structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    sa, sb = a.shape, b.shape
    if bv.ndim == 2 and av.ndim > 2:
        # weight matrix applied to a batch: one flat GEMM each way
        k, m = sb
        a2 = av.reshape(-1, k)

        def bw_flat(g):
            g2 = g.reshape(-1, m)
            ga = (g2 @ bv.T).reshape(sa) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return a.graph._op("matmul", (a, b), (a2 @ bv).reshape(sa[:-1] + (m,)), bw_flat)

    def bw(g):
        ga = g @ np.swapaxes(bv, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(av, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, sa),
            None if gb is None else _unbroadcast(gb, sb),
        )

    return a.graph._op("matmul", (a, b), av @ bv, bw)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return a.graph._op("reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return a.graph._op("transpose", (a,), a.value.transpose(axes), lambda g: (g.transpose(inv),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    axis = axis % parts[0].ndim
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def bw(g):
        idx = [slice(None)] * g.ndim
        out = []
        for i in range(len(parts)):
            idx[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(idx)])
        return out

    return parts[0].graph._op("concat", tuple(parts), np.concatenate([p.value for p in parts], axis), bw)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape, dtype = a.shape, a.value.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return a.graph._op("slice", (a,), a.value[idx], bw)


def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.value.dtype
    return a.graph._op("sum", (a,), np.asarray(a.value.sum(), dtype=dtype), lambda g: (np.full(shape, g, dtype=dtype),))


def embedding_gather(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` at integer ``ids`` (any shape); backward scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    bad = ids[(ids < 0) | (ids >= n)]
    if bad.size:
        raise IndexError(f"embedding id {int(bad.flat[0])} out of range for table with {n} rows")
    shape, dtype = table.shape, table.value.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return table.graph._op("gather", (table,), table.value[ids], bw)


# -------------------------------------------------------------- normalisation


def _check_mask(xv, mask):
    mask = np.asarray(mask, dtype=xv.dtype)
    if np.any(np.all(np.isneginf(np.broadcast_to(mask, xv.shape)), axis=-1)):
        raise ValueError("softmax row is fully masked")
    return mask


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis with an additive {0, -inf} mask."""
    xv = x.value
    if mask is not None:
        xv = xv + _check_mask(xv, mask)
    m = xv.max(axis=-1, keepdims=True)
    e = np.exp(xv - m)
    y = e / e.sum(axis=-1, keepdims=True)
    return x.graph._op("softmax", (x,), y, lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    xv = x.value
    m = xv.max(axis=-1, keepdims=True)
    z = xv - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return x.graph._op("log_softmax", (x,), y, lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def rmsnorm(x: Tensor, gain: Tensor | None = None, eps: float = RMSNORM_EPS) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` over the last axis."""
    xv = x.value
    r = np.sqrt((xv * xv).mean(axis=-1, keepdims=True) + xv.dtype.type(eps))
    xhat = xv / r
    if gain is None:
        return x.graph._op(
            "rmsnorm", (x,), xhat,
            lambda g: ((g - xhat * (g * xhat).mean(axis=-1, keepdims=True)) / r,),
        )
    if gain.shape != (xv.shape[-1],):
        raise ValueError(f"rmsnorm gain shape {gain.shape} does not match feature dim {xv.shape[-1]}")
    gv = gain.value

    def bw(g):
        gh = g * gv
        gx = (gh - xhat * (gh * xhat).mean(axis=-1, keepdims=True)) / r
        gg = (g * xhat).reshape(-1, gv.shape[0]).sum(axis=0)
        return gx, gg

    return x.graph._op("rmsnorm", (x, gain), xhat * gv, bw)


# ------------------------------------------------------------------ attention


def attention_scores(q: Tensor, k: Tensor, barrier=None) -> Tensor:
    """``q @ k^T`` over the last two axes.

    ``barrier[..., i, j]`` true means query ``i`` sees ``stop_gradient(k[j])``:
    the score still depends on ``k`` in the forward pass but pushes no adjoint
    into it.
    """
    qv, kv = q.value, k.value
    out = qv @ np.swapaxes(kv, -1, -2)
    if barrier is None or not np.any(barrier):
        return q.graph._op("scores", (q, k), out, lambda g: (g @ kv, np.swapaxes(g, -1, -2) @ qv))
    barrier = np.asarray(barrier, dtype=bool)
    kf = q.graph._sever(kv)
    if kf is not kv:
        out = np.where(barrier, qv @ np.swapaxes(kf, -1, -2), out)
    keep = (~barrier).astype(qv.dtype)

    def bw(g):
        return g @ kv, np.swapaxes(g * keep, -1, -2) @ qv

    return q.graph._op("scores", (q, k), out, bw)


def attention_mix(p: Tensor, v: Tensor, barrier=None) -> Tensor:
    """``p @ v`` where ``barrier[..., i, j]`` routes ``stop_gradient(v[j])`` into row ``i``."""
    pv, vv = p.value, v.value
    out = pv @ vv
    if barrier is None or not np.any(barrier):
        return p.graph._op("mix", (p, v), out, lambda g: (g @ np.swapaxes(vv, -1, -2), np.swapaxes(pv, -1, -2) @ g))
    barrier = np.asarray(barrier, dtype=bool)
    vf = p.graph._sever(vv)
    keep = (~barrier).astype(pv.dtype)
    pk = pv * keep
    if vf is not vv:
        out = pk @ vv + (pv * (1 - keep)) @ vf

    def bw(g):
        return g @ np.swapaxes(vv, -1, -2), np.swapaxes(pk, -1, -2) @ g

    return p.graph._op("mix", (p, v), out, bw)


# ------------------------------------------------------------------- backward


class GradientMap:
    """Gradients keyed by node; untouched nodes read as exact zeros."""

    def __init__(self, graph: Graph, grads: dict[int, np.ndarray]):
        self.graph = graph
        self._grads = grads

    def __getitem__(self, node: Tensor | int) -> np.ndarray:
        nid = node.id if isinstance(node, Tensor) else node
        g = self._grads.get(nid)
        if g is None:
            return np.zeros(self.graph.nodes[nid].shape, dtype=self.graph.dtype)
        return g

    def touched(self, node: Tensor) -> bool:
        return node.id in self._grads


def backward(loss: Tensor, retain: str = "all") -> GradientMap:
    """Adjoints of the scalar ``loss`` w.r.t. every ancestor, barriers respected.

    ``retain="leaves"`` frees each intermediate adjoint once it has been
    propagated, keeping only leaf gradients (the map then reads intermediates
    as zero).
    """
    if retain not in ("all", "leaves"):
        raise ValueError(f"retain must be 'all' or 'leaves', got {retain!r}")
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = loss.graph
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    nodes = graph.nodes
    for rec in reversed(graph.records[: _record_index(graph, loss.id) + 1]):
        g = grads.get(rec.output)
        if g is None or rec.backward is None:
            continue
        if retain == "leaves":
            del grads[rec.output]
        for nid, gi, blocked in zip(rec.inputs, rec.backward(g), rec.barrier):
            if blocked or gi is None or not nodes[nid].requires_grad:
                continue
            prev = grads.get(nid)
            grads[nid] = gi if prev is None else prev + gi
    return GradientMap(graph, grads)


def _record_index(graph: Graph, node_id: int) -> int:
    # node ids and record indices advance together, one record per node
    return node_id


# ----------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    tolerance: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = all(e <= self.tolerance for e in self.max_rel_error)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    tolerance: float = 1e-5,
    step: float = 1e-6,
    dtype=np.float64,
) -> GradCheckReport:
    """Compare analytic gradients of ``f(graph, *tensors)`` to central differences.

    The step is scaled per element by ``max(1, |x|)``.  Barriered operands are
    frozen at their unperturbed values while differencing, so the numerical
    side differentiates the severed function.  The error for each input is
    ``max|analytic - numeric| / max(max|numeric|, max|analytic|)``.
    """
    inputs = [np.array(x, dtype=dtype) for x in inputs]
    g0 = Graph(dtype)
    ts = [g0.tensor(x, trainable=True) for x in inputs]
    out = f(g0, *ts)
    gm = backward(out)
    frozen = g0.captured

    def evaluate(xs):
        g = Graph(dtype, severed=frozen)
        return float(f(g, *[g.tensor(x) for x in xs]).value)

    errors = []
    for k, x in enumerate(inputs):
        analytic = gm[ts[k]]
        numeric = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            h = step * max(1.0, abs(x[idx]))
            xp = [y.copy() for y in inputs]
            xm = [y.copy() for y in inputs]
            xp[k][idx] += h
            xm[k][idx] -= h
            numeric[idx] = (evaluate(xp) - evaluate(xm)) / (2 * h)
        denom = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0))
        err = 0.0 if denom == 0 else float(np.abs(analytic - numeric).max() / denom)
        errors.append(err)
    return GradCheckReport(errors, tolerance)
