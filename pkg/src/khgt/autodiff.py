"""Dense float64 tensors on a define-by-run reverse-mode tape.

A tape is rebuilt for every forward pass. Leaves are named parameter
arrays; every downstream op records (op kind, parent node ids, saved
forward value) plus a backward closure, so one reverse sweep produces
gradients for all named leaves.

Every op here accepts a mix of plain numpy arrays and `Var` nodes. With
no `Var` among the inputs the op is a plain numpy computation (nothing
is recorded), which is the inference path.
"""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

Array = np.ndarray

GradientMap = dict[str, Array]


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class NumericError(RuntimeError):
    """Non-finite value met where finite arithmetic was promised."""


def as_array(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Var:
    """One node on a Tape: a saved forward value plus backward closure."""

    __slots__ = ("tape", "node_id", "value", "op", "parent_ids", "bwd", "name")
    __array_ufunc__ = None  # keep numpy from absorbing Var operands

    def __init__(self, tape: "Tape", node_id: int, value: Array, op: str,
                 parent_ids: tuple[int, ...], bwd, name: str | None = None):
        self.tape = tape
        self.node_id = node_id
        self.value = value
        self.op = op
        self.parent_ids = parent_ids
        self.bwd = bwd
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"<Var #{self.node_id} {self.op} shape={self.value.shape}{tag}>"

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

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Ordered op record for one forward pass (define-by-run)."""

    def __init__(self):
        self.nodes: list[Var] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: str | None = None) -> Var:
        return self._record("leaf", as_array(value), (), None, name=name)

    def _record(self, op: str, value: Array, parents: tuple[Var, ...],
                bwd, name: str | None = None) -> Var:
        node = Var(self, len(self.nodes), value, op,
                   tuple(p.node_id for p in parents), bwd, name=name)
        self.nodes.append(node)
        return node


def value_of(x) -> Array:
    return x.value if isinstance(x, Var) else as_array(x)


def _split(x) -> tuple[Var | None, Array]:
    if isinstance(x, Var):
        return x, x.value
    return None, as_array(x)


def _tape_of(*parts) -> Tape | None:
    for p in parts:
        if isinstance(p, Var):
            return p.tape
    return None


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _emit(op: str, out: Array, operands: Sequence, bwd_builder) -> Var | Array:
    tape = _tape_of(*operands)
    if tape is None:
        return out
    parents = tuple(p for p in operands if isinstance(p, Var))
    return tape._record(op, out, parents, bwd_builder(parents))


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    va, xa = _split(a)
    vb, xb = _split(b)
    out = xa + xb

    def build(parents):
        def bwd(g):
            contrib = []
            if va is not None:
                contrib.append((va, _unbroadcast(g, xa.shape)))
            if vb is not None:
                contrib.append((vb, _unbroadcast(g, xb.shape)))
            return contrib
        return bwd

    return _emit("add", out, (a, b), build)


def sub(a, b):
    va, xa = _split(a)
    vb, xb = _split(b)
    out = xa - xb

    def build(parents):
        def bwd(g):
            contrib = []
            if va is not None:
                contrib.append((va, _unbroadcast(g, xa.shape)))
            if vb is not None:
                contrib.append((vb, _unbroadcast(-g, xb.shape)))
            return contrib
        return bwd

    return _emit("sub", out, (a, b), build)


def mul(a, b):
    va, xa = _split(a)
    vb, xb = _split(b)
    out = xa * xb

    def build(parents):
        def bwd(g):
            contrib = []
            if va is not None:
                contrib.append((va, _unbroadcast(g * xb, xa.shape)))
            if vb is not None:
                contrib.append((vb, _unbroadcast(g * xa, xb.shape)))
            return contrib
        return bwd

    return _emit("mul", out, (a, b), build)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    """Matrix product: 2d @ 2d, 3d @ 3d (same batch), or 3d @ 2d."""
    va, xa = _split(a)
    vb, xb = _split(b)
    if xa.ndim not in (2, 3) or xb.ndim not in (2, 3) or xb.ndim > xa.ndim:
        raise ShapeError(f"matmul expects 2d/3d operands, got {xa.shape} and {xb.shape}")
    if xa.shape[-1] != xb.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {xa.shape} x {xb.shape}")
    if xa.ndim == 3 and xb.ndim == 3 and xa.shape[0] != xb.shape[0]:
        raise ShapeError(f"matmul batch dimensions differ: {xa.shape} x {xb.shape}")
    out = xa @ xb

    def build(parents):
        def bwd(g):
            contrib = []
            if va is not None:
                contrib.append((va, g @ xb.swapaxes(-1, -2)))
            if vb is not None:
                if xa.ndim == 3 and xb.ndim == 2:
                    contrib.append((vb, np.tensordot(xa, g, axes=([0, 1], [0, 1]))))
                else:
                    contrib.append((vb, xa.swapaxes(-1, -2) @ g))
            return contrib
        return bwd

    return _emit("matmul", out, (a, b), build)


def transpose_last2(a):
    va, xa = _split(a)
    out = xa.swapaxes(-1, -2)

    def build(parents):
        def bwd(g):
            return [(va, g.swapaxes(-1, -2))] if va is not None else []
        return bwd

    return _emit("transpose", out, (a,), build)


# ---------------------------------------------------------------------------
# shape plumbing

def reshape(a, shape):
    va, xa = _split(a)
    out = xa.reshape(shape)

    def build(parents):
        def bwd(g):
            return [(va, g.reshape(xa.shape))] if va is not None else []
        return bwd

    return _emit("reshape", out, (a,), build)


def concat(parts: Sequence, axis: int = 0):
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def build(parents):
        def bwd(g):
            contrib = []
            for part, start, stop in zip(parts, offsets[:-1], offsets[1:]):
                if isinstance(part, Var):
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(start, stop)
                    contrib.append((part, g[tuple(sl)]))
            return contrib
        return bwd

    return _emit("concat", out, tuple(parts), build)


def slice_axis1(a, start: int, stop: int):
    va, xa = _split(a)
    out = xa[:, start:stop]

    def build(parents):
        def bwd(g):
            if va is None:
                return []
            buf = np.zeros_like(xa)
            buf[:, start:stop] = g
            return [(va, buf)]
        return bwd

    return _emit("slice", out, (a,), build)


def gather_rows(a, index):
    """Row lookup a[index]; backward scatter-adds into the source rows."""
    va, xa = _split(a)
    idx = np.asarray(index, dtype=np.intp)
    out = xa[idx]

    def build(parents):
        def bwd(g):
            if va is None:
                return []
            buf = np.zeros_like(xa)
            np.add.at(buf, idx, g)
            return [(va, buf)]
        return bwd

    return _emit("gather", out, (a,), build)


# ---------------------------------------------------------------------------
# reductions

def sum_all(a):
    va, xa = _split(a)
    out = as_array(xa.sum())

    def build(parents):
        def bwd(g):
            return [(va, np.broadcast_to(g, xa.shape).copy())] if va is not None else []
        return bwd

    return _emit("sum", out, (a,), build)


def sum_axis(a, axis: int, keepdims: bool = False):
    va, xa = _split(a)
    out = xa.sum(axis=axis, keepdims=keepdims)

    def build(parents):
        def bwd(g):
            if va is None:
                return []
            gg = g if keepdims else np.expand_dims(g, axis)
            return [(va, np.broadcast_to(gg, xa.shape).copy())]
        return bwd

    return _emit("sum_axis", out, (a,), build)


def segment_sum(a, segments, num_segments: int):
    """Sum rows of `a` into `num_segments` buckets keyed by `segments`."""
    va, xa = _split(a)
    seg = np.asarray(segments, dtype=np.intp)
    out = np.zeros((num_segments,) + xa.shape[1:], dtype=np.float64)
    np.add.at(out, seg, xa)

    def build(parents):
        def bwd(g):
            return [(va, g[seg])] if va is not None else []
        return bwd

    return _emit("segment_sum", out, (a,), build)


# ---------------------------------------------------------------------------
# nonlinearities

def softmax(a):
    """Softmax along the last axis, stabilized by max subtraction.

    Empty input comes back unchanged (empty); callers deal with empty
    neighborhoods before reaching here.
    """
    va, xa = _split(a)
    if xa.size == 0:
        out = xa.copy()
        return _emit("softmax", out, (a,), lambda parents: (lambda g: [(va, g.copy())] if va is not None else []))
    shifted = xa - xa.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def build(parents):
        def bwd(g):
            if va is None:
                return []
            inner = (out * g).sum(axis=-1, keepdims=True)
            return [(va, out * (g - inner))]
        return bwd

    return _emit("softmax", out, (a,), build)


def segment_softmax(a, segments, num_segments: int):
    """Per-segment softmax over axis 0; trailing axes normalize independently.

    `a` is (E,) or (E, C); rows sharing a segment id form one softmax.
    """
    va, xa = _split(a)
    seg = np.asarray(segments, dtype=np.intp)
    squeeze = xa.ndim == 1
    work = xa[:, None] if squeeze else xa
    if work.shape[0] != seg.shape[0]:
        raise ShapeError(f"segment_softmax rows {work.shape} vs segments {seg.shape}")
    cols = work.shape[1]
    mx = np.full((num_segments, cols), -np.inf)
    np.maximum.at(mx, seg, work)
    e = np.exp(work - mx[seg])
    den = np.zeros((num_segments, cols))
    np.add.at(den, seg, e)
    norm = e / den[seg]
    out = norm[:, 0] if squeeze else norm

    def build(parents):
        def bwd(g):
            if va is None:
                return []
            gg = g[:, None] if squeeze else g
            weighted = norm * gg
            tot = np.zeros((num_segments, cols))
            np.add.at(tot, seg, weighted)
            dx = norm * (gg - tot[seg])
            return [(va, dx[:, 0] if squeeze else dx)]
        return bwd

    return _emit("segment_softmax", out, (a,), build)


def leaky_relu(a, slope: float):
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    va, xa = _split(a)
    out = np.where(xa >= 0.0, xa, slope * xa)

    def build(parents):
        def bwd(g):
            if va is None:
                return []
            return [(va, g * np.where(xa >= 0.0, 1.0, slope))]
        return bwd

    return _emit("leaky_relu", out, (a,), build)


def relu(a):
    va, xa = _split(a)
    out = np.maximum(xa, 0.0)

    def build(parents):
        def bwd(g):
            if va is None:
                return []
            return [(va, g * (xa > 0.0))]
        return bwd

    return _emit("relu", out, (a,), build)


# ---------------------------------------------------------------------------
# reverse sweep and the finite-difference oracle

def backward(tape: Tape, loss: Var) -> GradientMap:
    """Gradient of a scalar `loss` node w.r.t. every named leaf on `tape`.

    Leaves the loss never touched come back as zero arrays so optimizers
    can treat the map as total.
    """
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise ValueError("loss must be a node on the given tape")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    grads: list[Array | None] = [None] * len(tape.nodes)
    grads[loss.node_id] = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        g = grads[node.node_id]
        if g is None or node.bwd is None:
            continue
        for parent, contribution in node.bwd(g):
            pg = grads[parent.node_id]
            grads[parent.node_id] = contribution if pg is None else pg + contribution
    result: GradientMap = {}
    for node in tape.nodes:
        if node.name is None:
            continue
        if node.name in result:
            raise ValueError(f"parameter {node.name!r} appears more than once on the tape")
        g = grads[node.node_id]
        result[node.name] = np.zeros_like(node.value) if g is None else g
    return result


def _scalar_output(result) -> float:
    v = value_of(result)
    if v.size != 1:
        raise ValueError(f"model output must be scalar, got shape {v.shape}")
    return float(v)


def grad_check(model_fn: Callable[[Mapping[str, object]], object], params,
               eps: float) -> float:
    """Max relative disagreement between tape gradients and central differences.

    `model_fn` maps a dict of named tensors (Vars or arrays) to a scalar;
    it is evaluated once on a tape for analytic gradients and twice per
    scalar entry for the numeric side. Relative error for one entry is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    tensors = params.tensors() if hasattr(params, "tensors") else dict(params)
    tensors = {k: as_array(v) for k, v in tensors.items()}

    tape = Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in tensors.items()}
    analytic = backward(tape, model_fn(leaves))

    work = {k: v.copy() for k, v in tensors.items()}
    worst = 0.0
    for name, arr in tensors.items():
        flat = work[name].ravel()
        analytic_flat = analytic[name].ravel()
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            f_plus = _scalar_output(model_fn(work))
            flat[i] = saved - eps
            f_minus = _scalar_output(model_fn(work))
            flat[i] = saved
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"non-finite model output while perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic_flat[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
