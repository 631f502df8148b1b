"""Dense tensors and taped reverse-mode differentiation.

A Graph is an append-only tape of operations, built during one forward pass
and consumed by backward(). Tensors without a grad_id are plain values; ops
on them compute eagerly and record nothing, so the same numeric code runs
with or without differentiation.

Recording is confined to one execution context: the active graph is stored
per thread, and minibatch items differentiated in parallel each open their
own graph.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Union

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class GradientError(KeyError):
    """A gradient was requested for a tensor the graph never recorded."""


class Tensor:
    """Dense real array, optionally linked into the active graph.

    ``data`` is a row-major numpy array (float64 by default, float32 for
    speed runs). ``grad_id`` is the handle of the node that produced this
    value on the tape, or None for untracked values.
    """

    __slots__ = ("data", "grad_id")

    def __init__(self, data, grad_id: Optional[int] = None, dtype=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(dtype or DEFAULT_DTYPE)
        elif dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.grad_id = grad_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f", grad_id={self.grad_id}" if self.grad_id is not None else ""
        return f"Tensor(shape={tuple(self.shape)}{tag})"


TensorLike = Union[Tensor, np.ndarray, float, int, list, tuple]


def astensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("kind", "inputs", "vjp")

    def __init__(self, kind: str, inputs: tuple, vjp: Callable):
        self.kind = kind
        self.inputs = inputs  # grad_ids of differentiable inputs (None entries allowed)
        self.vjp = vjp        # seed array -> tuple of grad arrays aligned with inputs


_tls = threading.local()


def _active() -> Optional["Graph"]:
    return getattr(_tls, "graph", None)


class Graph:
    """Append-only record of one forward pass.

    nodes[i] knows how to turn the gradient of output i into gradients of
    its inputs (each node saves only the values its reverse rule needs).
    ``outputs`` collects handles whose gradients will be requested; the last
    marked output is the one backward() seeds.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.outputs: list[int] = []
        self._shapes: dict[int, tuple] = {}

    def _record(self, kind, inputs, vjp, out_shape) -> int:
        gid = len(self.nodes)
        self.nodes.append(_Node(kind, inputs, vjp))
        self._shapes[gid] = out_shape
        return gid

    def leaf(self, data) -> Tensor:
        """Register an input tensor whose gradient is wanted."""
        t = astensor(data)
        gid = self._record("leaf", (), lambda g: (), t.shape)
        return Tensor(t.data, grad_id=gid)

    def mark_output(self, t: Tensor) -> Tensor:
        if t.grad_id is None:
            raise GradientError("cannot mark an untracked tensor as graph output")
        self.outputs.append(t.grad_id)
        return t

    def __enter__(self):
        if _active() is not None:
            raise RuntimeError("a Graph is already recording in this thread")
        _tls.graph = self
        return self

    def __exit__(self, *exc):
        _tls.graph = None
        return False


class GradMap:
    """Result of backward(): gradients keyed by grad_id."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, key: Union[int, Tensor]) -> Tensor:
        gid = key.grad_id if isinstance(key, Tensor) else key
        if gid is None or gid not in self._grads:
            raise GradientError(
                "gradient requested for a tensor that was never recorded on the graph"
            )
        return Tensor(self._grads[gid])

    def __contains__(self, key) -> bool:
        gid = key.grad_id if isinstance(key, Tensor) else key
        return gid is not None and gid in self._grads


def backward(graph: Graph, seed: TensorLike, output: Optional[Tensor] = None) -> GradMap:
    """Vector-Jacobian product of the recorded computation.

    ``seed`` must match the shape of the seeded output (the last marked
    output of the graph unless ``output`` is given explicitly).
    """
    if output is not None:
        if output.grad_id is None:
            raise GradientError("output tensor was never recorded on the graph")
        out_id = output.grad_id
    elif graph.outputs:
        out_id = graph.outputs[-1]
    else:
        raise GradientError("graph has no marked output to seed")

    seed = astensor(seed)
    want = graph._shapes[out_id]
    if tuple(seed.shape) != tuple(want):
        raise ShapeError(
            f"backward: seed shape {tuple(seed.shape)} does not match "
            f"graph output shape {tuple(want)}"
        )

    grads: dict[int, np.ndarray] = {out_id: seed.data}
    for gid in range(out_id, -1, -1):
        g = grads.get(gid)
        if g is None:
            continue
        node = graph.nodes[gid]
        if node.kind == "leaf":
            continue
        for in_id, piece in zip(node.inputs, node.vjp(g)):
            if in_id is None or piece is None:
                continue
            acc = grads.get(in_id)
            grads[in_id] = piece if acc is None else acc + piece
    return GradMap(grads)


# ---------------------------------------------------------------------------
# op plumbing


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _emit(kind: str, inputs: Iterable[Tensor], out: np.ndarray, vjp: Callable) -> Tensor:
    graph = _active()
    ids = tuple(t.grad_id for t in inputs)
    if graph is None or all(i is None for i in ids):
        return Tensor(out)
    gid = graph._record(kind, ids, vjp, out.shape)
    return Tensor(out, grad_id=gid)


def _check_broadcast(kind: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{kind}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast"
        ) from None


# ---------------------------------------------------------------------------
# elementwise and linear ops


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_broadcast("mul", a, b)
    da, db, sa, sb = a.data, b.data, a.shape, b.shape
    return _emit("mul", (a, b), da * db,
                 lambda g: (_unbroadcast(g * db, sa), _unbroadcast(g * da, sb)))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_broadcast("div", a, b)
    da, db, sa, sb = a.data, b.data, a.shape, b.shape
    out = da / db
    return _emit("div", (a, b), out,
                 lambda g: (_unbroadcast(g / db, sa),
                            _unbroadcast(-g * out / db, sb)))


def scale(a: TensorLike, c: float) -> Tensor:
    a = astensor(a)
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = astensor(a), astensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: shapes {tuple(a.shape)} and {tuple(b.shape)} do not conform"
        )
    da, db = a.data, b.data
    return _emit("matmul", (a, b), da @ db,
                 lambda g: (g @ db.T, da.T @ g))


def tsum(a: TensorLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    da = a.data
    out = da.sum(axis=axis, keepdims=keepdims)
    shape = da.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _emit("sum", (a,), np.asarray(out), vjp)


def square(a: TensorLike) -> Tensor:
    a = astensor(a)
    da = a.data
    return _emit("square", (a,), da * da, lambda g: (2.0 * da * g,))


def sqrt(a: TensorLike) -> Tensor:
    a = astensor(a)
    out = np.sqrt(a.data)
    return _emit("sqrt", (a,), out, lambda g: (0.5 * g / out,))


def exp(a: TensorLike) -> Tensor:
    a = astensor(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def max0(a: TensorLike) -> Tensor:
    a = astensor(a)
    da = a.data
    return _emit("max0", (a,), np.maximum(da, 0.0),
                 lambda g: (np.where(da > 0.0, g, 0.0),))


def maximum(a: TensorLike, b: TensorLike) -> Tensor:
    """Elementwise max; ties send the gradient to the first argument."""
    a, b = astensor(a), astensor(b)
    _check_broadcast("maximum", a, b)
    da, db, sa, sb = a.data, b.data, a.shape, b.shape
    take_a = da >= db
    return _emit("maximum", (a, b), np.where(take_a, da, db),
                 lambda g: (_unbroadcast(np.where(take_a, g, 0.0), sa),
                            _unbroadcast(np.where(take_a, 0.0, g), sb)))


def abs_smooth(a: TensorLike, alpha: float) -> Tensor:
    """Moreau envelope of |.| (Huber): quadratic inside |x| <= 1/alpha.

    Differentiable everywhere, with gradient clip(alpha*x, -1, 1); the graph
    never sees a raw absolute value.
    """
    a = astensor(a)
    alpha = float(alpha)
    if alpha <= 0:
        raise ValueError("abs_smooth: alpha must be > 0")
    da = a.data
    ax = np.abs(da)
    out = np.where(ax <= 1.0 / alpha, 0.5 * alpha * da * da, ax - 0.5 / alpha)
    return _emit("abs_smooth", (a,), out,
                 lambda g: (g * np.clip(alpha * da, -1.0, 1.0),))


def reshape(a: TensorLike, shape) -> Tensor:
    a = astensor(a)
    old = a.data.shape
    return _emit("reshape", (a,), a.data.reshape(shape),
                 lambda g: (g.reshape(old),))


def gather(a: TensorLike, idx) -> Tensor:
    """Rows of ``a`` at ``idx`` (any integer index shape, axis 0)."""
    a = astensor(a)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"gather: index dtype {idx.dtype} is not integral")
    da = a.data

    def vjp(g):
        out = np.zeros(da.shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("gather", (a,), da[idx], vjp)


def scatter_add(v: TensorLike, idx, size: int) -> Tensor:
    """Accumulate rows of ``v`` into a zero array of ``size`` rows.

    Repeated indices accumulate; exact adjoint of gather.
    """
    v = astensor(v)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"scatter_add: index dtype {idx.dtype} is not integral")
    dv = v.data
    if dv.shape[: idx.ndim] != idx.shape:
        raise ShapeError(
            f"scatter_add: value shape {tuple(dv.shape)} does not start with "
            f"index shape {tuple(idx.shape)}"
        )
    out = np.zeros((size,) + dv.shape[idx.ndim:], dtype=dv.dtype)
    np.add.at(out, idx, dv)
    return _emit("scatter_add", (v,), out, lambda g: (g[idx],))


def reduce_norm2(a: TensorLike, axis: int, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; gradient is 0 where the norm is 0."""
    a = astensor(a)
    da = a.data
    n = np.sqrt(np.sum(da * da, axis=axis, keepdims=True))

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.where(n > 0.0, gg / n, 0.0)
        return (da * r,)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _emit("reduce_norm2", (a,), out, vjp)


_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "scale": scale,
    "sum": tsum,
    "sqrt": sqrt,
    "square": square,
    "exp": exp,
    "abs_smooth": abs_smooth,
    "max0": max0,
    "maximum": maximum,
    "gather": gather,
    "scatter_add": scatter_add,
    "reduce_norm2": reduce_norm2,
    "reshape": reshape,
}


def forward_op(kind: str, *inputs, **params) -> Tensor:
    """Apply an operation by kind name. See _OPS for the supported set."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"forward_op: unknown op kind {kind!r}") from None
    return fn(*inputs, **params)
