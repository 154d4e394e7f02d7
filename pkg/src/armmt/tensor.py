"""Dense float64 tensors with reverse-mode gradient accumulation.

Every value in the compute graph is a ``Tensor``: a numpy float64 array plus
the bookkeeping needed to replay the chain rule backwards (op tag, input
references, a per-sweep gradient accumulator).  Graphs are built define-by-run
and thrown away after ``backward``; ``Parameter`` leaves persist across
graphs and carry the optimizer state.

Nodes whose subtree contains no Parameter carry no backward closure, so
constant branches (frozen embeddings, precomputed feature blocks) cost
nothing during the sweep.

The op set is deliberately small: exactly what the re-ranking model needs,
with numerically stable softmax/sigmoid and a finite-difference gradient
checker to keep the whole stack honest.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_EVAL_DTYPE = np.float64


@contextmanager
def eval_dtype(dtype):
    """Temporarily change the dtype new tensors are created with.

    Used by the gradient checker to evaluate finite differences in extended
    precision; normal operation is always float64.
    """
    global _EVAL_DTYPE
    previous = _EVAL_DTYPE
    _EVAL_DTYPE = dtype
    try:
        yield
    finally:
        _EVAL_DTYPE = previous


class TensorError(Exception):
    """Base class for compute-graph errors."""


class ShapeError(TensorError, ValueError):
    """Operand shapes (or an axis) are incompatible with the requested op."""


class GraphError(TensorError, RuntimeError):
    """Graph misuse: non-scalar backward root, repeated sweep, or a cycle."""


class Tensor:
    """A graph node: float64 ndarray value plus reverse-mode plumbing.

    Leaf tensors (constants, parameters) have no inputs.  Interior nodes
    remember their inputs and a backward closure; ``grad`` is populated only
    during a backward sweep and is meaningless outside one.
    """

    __slots__ = ("data", "inputs", "op", "grad", "req", "_bw", "_swept")

    def __init__(self, data, inputs: tuple = (), op: str = "leaf", req: bool | None = None):
        self.data = np.asarray(data, dtype=_EVAL_DTYPE)
        self.inputs = inputs
        self.op = op
        self.req = any(t.req for t in inputs) if req is None else req
        self.grad: np.ndarray | None = None
        self._bw: Callable[[np.ndarray], None] | None = None
        self._swept = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """A named trainable leaf with its AdaGrad accumulator."""

    __slots__ = ("name", "accum")

    def __init__(self, name: str, value):
        super().__init__(value, op="param", req=True)
        self.name = name
        self.accum = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _acc(t: Tensor, g: np.ndarray) -> None:
    # Never mutate in place: contributions may alias the consumer's grad.
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, (a, b), "add")
    if out.req:

        def bw(g):
            if a.req:
                _acc(a, _unbroadcast(g, a.data.shape))
            if b.req:
                _acc(b, _unbroadcast(g, b.data.shape))

        out._bw = bw
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data, (a, b), "sub")
    if out.req:

        def bw(g):
            if a.req:
                _acc(a, _unbroadcast(g, a.data.shape))
            if b.req:
                _acc(b, _unbroadcast(-g, b.data.shape))

        out._bw = bw
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = Tensor(ad * bd, (a, b), "mul")
    if out.req:

        def bw(g):
            if a.req:
                _acc(a, _unbroadcast(g * bd, ad.shape))
            if b.req:
                _acc(b, _unbroadcast(g * ad, bd.shape))

        out._bw = bw
    return out


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data * c, (x,), "scale")
    if out.req:

        def bw(g):
            _acc(x, g * c)

        out._bw = bw
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    """Matrix product.

    Supports plain (m,k)@(k,n), stacked batches with identical leading axes,
    and the weight-broadcast case (..., m, k) @ (k, n).
    """
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    broadcast_b = ad.ndim > 2 and bd.ndim == 2
    if (
        ad.ndim < 2
        or bd.ndim < 2
        or ad.shape[-1] != bd.shape[-2]
        or (not broadcast_b and ad.shape[:-2] != bd.shape[:-2])
    ):
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} x {bd.shape}")
    out = Tensor(ad @ bd, (a, b), "matmul")
    if out.req:

        def bw(g):
            if a.req:
                _acc(a, g @ _swap(bd))
            if b.req:
                if broadcast_b:
                    k, n = bd.shape
                    _acc(b, ad.reshape(-1, k).T @ g.reshape(-1, n))
                else:
                    _acc(b, _swap(ad) @ g)

        out._bw = bw
    return out


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis, with per-row max subtraction."""
    x = as_tensor(x)
    d = x.data
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, (x,), "softmax_rows")
    if out.req:

        def bw(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            _acc(x, (g - dot) * y)

        out._bw = bw
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # Saturating form: exp is only ever taken of a non-positive argument.
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Tensor(y, (x,), "sigmoid")
    if out.req:

        def bw(g):
            _acc(x, g * y * (1.0 - y))

        out._bw = bw
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0), (x,), "relu")
    if out.req:

        def bw(g):
            _acc(x, g * (x.data > 0))

        out._bw = bw
    return out


_ACTIVATIONS = {"sigmoid": sigmoid, "relu": relu}


def activate(x, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return fn(x)


def safe_log(x, floor: float = 1e-12) -> Tensor:
    """log with the input clamped at ``floor``; zero gradient below the clamp."""
    x = as_tensor(x)
    d = x.data
    out = Tensor(np.log(np.maximum(d, floor)), (x,), "safe_log")
    if out.req:

        def bw(g):
            _acc(x, np.where(d > floor, g / np.maximum(d, floor), 0.0))

        out._bw = bw
    return out


# ---------------------------------------------------------------------------
# reductions and shape surgery
# ---------------------------------------------------------------------------


def _check_axis(x: Tensor, axis: int) -> None:
    if not 0 <= axis < x.data.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.data.shape}")


def mean_axis(x, axis: int) -> Tensor:
    x = as_tensor(x)
    _check_axis(x, axis)
    n = x.data.shape[axis]
    out = Tensor(x.data.mean(axis=axis), (x,), "mean_axis")
    if out.req:

        def bw(g):
            _acc(x, np.broadcast_to(np.expand_dims(g / n, axis), x.data.shape))

        out._bw = bw
    return out


def sum_axis(x, axis: int) -> Tensor:
    x = as_tensor(x)
    _check_axis(x, axis)
    out = Tensor(x.data.sum(axis=axis), (x,), "sum_axis")
    if out.req:

        def bw(g):
            _acc(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

        out._bw = bw
    return out


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(), (x,), "sum_all")
    if out.req:

        def bw(g):
            _acc(x, np.broadcast_to(g, x.data.shape))

        out._bw = bw
    return out


def concat(parts: Sequence, axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    first = parts[0].data.shape
    if not 0 <= axis < len(first):
        raise ShapeError(f"axis {axis} out of range for shape {first}")
    for p in parts[1:]:
        s = p.data.shape
        if len(s) != len(first) or any(
            i != axis and s[i] != first[i] for i in range(len(first))
        ):
            raise ShapeError(
                f"concat along axis {axis}: shape {s} incompatible with {first}"
            )
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), "concat")
    if out.req:
        sizes = [p.data.shape[axis] for p in parts]

        def bw(g):
            offset = 0
            for p, s in zip(parts, sizes):
                if p.req:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(offset, offset + s)
                    _acc(p, g[tuple(idx)])
                offset += s

        out._bw = bw
    return out


def slice_rows(x, start: int, stop: int) -> Tensor:
    """Contiguous slice along the first axis."""
    x = as_tensor(x)
    out = Tensor(x.data[start:stop], (x,), "slice_rows")
    if out.req:

        def bw(g):
            buf = np.zeros_like(x.data)
            buf[start:stop] = g
            _acc(x, buf)

        out._bw = bw
    return out


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape), (x,), "reshape")
    if out.req:

        def bw(g):
            _acc(x, g.reshape(x.data.shape))

        out._bw = bw
    return out


def transpose(x, axes: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.transpose(axes), (x,), "transpose")
    if out.req:
        inv = tuple(np.argsort(axes))

        def bw(g):
            _acc(x, g.transpose(inv))

        out._bw = bw
    return out


def tile(x, reps: tuple[int, ...]) -> Tensor:
    """np.tile with gradient summed back over the repeated blocks."""
    x = as_tensor(x)
    if len(reps) != x.data.ndim:
        raise ShapeError(f"tile reps {reps} must match rank of shape {x.data.shape}")
    out = Tensor(np.tile(x.data, reps), (x,), "tile")
    if out.req:
        shp = []
        for r, s in zip(reps, x.data.shape):
            shp.extend((r, s))
        sum_axes = tuple(range(0, 2 * len(reps), 2))

        def bw(g):
            _acc(x, g.reshape(shp).sum(axis=sum_axes))

        out._bw = bw
    return out


def gather_rows(table, ids) -> Tensor:
    """Row gather ``table[ids]``; gradient scatters back with repeats summed."""
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.intp)
    rows = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise ShapeError(
            f"gather index out of range: ids span [{idx.min()}, {idx.max()}] "
            f"for table with {rows} rows"
        )
    out = Tensor(table.data[idx], (table,), "gather_rows")
    if out.req:

        def bw(g):
            buf = np.zeros_like(table.data)
            np.add.at(buf, idx, g)
            _acc(table, buf)

        out._bw = bw
    return out


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = Tensor(gamma.data * xh + beta.data, (x, gamma, beta), "layer_norm")
    if out.req:

        def bw(g):
            sum_axes = tuple(range(g.ndim - 1))
            if gamma.req:
                _acc(gamma, (g * xh).sum(axis=sum_axes))
            if beta.req:
                _acc(beta, g.sum(axis=sum_axes))
            if x.req:
                dxh = g * gamma.data
                m1 = dxh.mean(axis=-1, keepdims=True)
                m2 = (dxh * xh).mean(axis=-1, keepdims=True)
                _acc(x, inv * (dxh - m1 - xh * m2))

        out._bw = bw
    return out


# ---------------------------------------------------------------------------
# backward sweep
# ---------------------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS; raises on cycles (defensive)."""
    GRAY, BLACK = 1, 2
    state: dict[int, int] = {}
    order: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        nid = id(node)
        if done:
            state[nid] = BLACK
            order.append(node)
            continue
        st = state.get(nid)
        if st == BLACK:
            continue
        if st == GRAY:
            raise GraphError("cycle detected in compute graph")
        state[nid] = GRAY
        stack.append((node, True))
        for inp in node.inputs:
            if inp.req:  # constant subtrees receive no gradient
                s = state.get(id(inp))
                if s == GRAY:
                    raise GraphError("cycle detected in compute graph")
                if s != BLACK:
                    stack.append((inp, False))
    return order


def backward(root: Tensor) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar root; returns {parameter name: gradient}.

    Gradient buffers of every node in the sweep are reset first, so the
    returned map is the gradient of this root alone.  Sweeping the same root
    twice is an error: the graph must be rebuilt (define-by-run).
    """
    if root.data.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {root.data.shape}")
    if root._swept:
        raise GraphError("repeated backward on the same root without rebuilding the graph")
    root._swept = True
    if not root.req:
        return {}
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    grads: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        if node._bw is not None:
            node._bw(g)
        if isinstance(node, Parameter):
            grads[node.name] = g
    return grads


def _rel_err(analytic: float, numeric: float) -> float:
    denom = max(abs(analytic), abs(numeric), 1e-8)
    return abs(analytic - numeric) / denom


def grad_check(
    fn: Callable[[], Tensor],
    params: Iterable[Parameter],
    epsilon: float = 1e-5,
    refine_threshold: float = 1e-6,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` must rebuild its graph on every call and return a scalar Tensor.
    The relative error denominator is max(|analytic|, |numeric|, 1e-8).

    Entries whose float64 difference quotient disagrees beyond
    ``refine_threshold`` are re-measured with the forward pass evaluated in
    extended precision (x86 long double).  Float64 rounding of order-one
    intermediates puts an absolute noise floor of roughly 1e-11 on the
    difference quotient, which swamps correct gradients smaller than ~1e-7;
    the refined oracle is the same central difference with that floor pushed
    three orders of magnitude down.
    """
    params = list(params)
    grads = backward(fn())
    suspicious: list[tuple[Parameter, int, float]] = []
    worst = 0.0
    for p in params:
        analytic = grads.get(p.name)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fplus = float(fn().data)
            flat[i] = orig - epsilon
            fminus = float(fn().data)
            flat[i] = orig
            numeric = (fplus - fminus) / (2.0 * epsilon)
            err = _rel_err(aflat[i], numeric)
            if err > refine_threshold:
                suspicious.append((p, i, aflat[i]))
            else:
                worst = max(worst, err)
    if suspicious:
        originals = {id(p): p.data for p in params}
        for p in params:
            p.data = p.data.astype(np.longdouble)
        eps_ld = np.longdouble(epsilon)
        try:
            with eval_dtype(np.longdouble):
                for p, i, analytic_i in suspicious:
                    flat = p.data.reshape(-1)
                    orig = flat[i]
                    flat[i] = orig + eps_ld
                    fplus = np.longdouble(fn().data)
                    flat[i] = orig - eps_ld
                    fminus = np.longdouble(fn().data)
                    flat[i] = orig
                    numeric = float((fplus - fminus) / (2.0 * eps_ld))
                    worst = max(worst, _rel_err(analytic_i, numeric))
        finally:
            for p in params:
                p.data = originals[id(p)]
    return worst
