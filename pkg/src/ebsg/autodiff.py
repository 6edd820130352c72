"""Reverse-mode automatic differentiation over dense float64 arrays.

Every primitive operation is recorded on an explicit tape
(:class:`ComputationRecord`).  Forward values are plain numpy arrays;
``backward`` walks the tape in reverse execution order and accumulates
vector-Jacobian products.  Two backward flavors exist:

* the default accumulates raw numpy gradients (fast path), and
* ``create_graph=True`` expresses every vector-Jacobian product through
  recorded operations, so the resulting gradients are themselves
  differentiable.  The Langevin refinement loop depends on this to keep
  its whole update chain inside one differentiable graph.

Arrays handed to the engine are frozen (numpy writeable flag cleared).
Downstream code must replace values rather than mutate them in place;
replays and saved activations rely on recorded buffers staying intact.
"""

from __future__ import annotations

import heapq
import threading

import numpy as np

__all__ = [
    "Tensor",
    "ComputationRecord",
    "GradientMap",
    "RecordError",
    "RecordConsumedError",
    "UnknownOpError",
    "NonScalarRootError",
    "NonFiniteError",
    "backward",
    "finite_difference_check",
    "no_grad",
    "record",
    "tensor",
    "constant",
    # primitive ops
    "matmul",
    "add",
    "elementwise_mul",
    "concat",
    "sum_over_axis",
    "sigmoid",
    "tanh",
    "relu",
    "affine",
    "scalar_scale",
    "slice_axis",
    "stack",
    "softmax_cross_entropy",
    "softmax",
    "log",
    "reshape",
    "clip",
    "transpose",
    "broadcast_to",
]


class RecordError(RuntimeError):
    """No active ComputationRecord, or a tensor is not on the record."""


class RecordConsumedError(RecordError):
    """The record was closed; no further recording or backward passes."""


class UnknownOpError(KeyError):
    """``record`` was asked for an op kind that is not in the catalog."""


class NonScalarRootError(ValueError):
    """backward requires a root whose shape product is one."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or infinity."""


class Tensor:
    """Immutable dense float64 array plus a requires_grad flag.

    Construct through :func:`tensor` / :func:`constant`; the raw
    constructor assumes an already validated, frozen array.
    """

    __slots__ = ("value", "requires_grad")

    def __init__(self, value: np.ndarray, requires_grad: bool = False):
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def item(self) -> float:
        return float(self.value.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.value, False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.value.shape)}{flag})"

    # Small amount of sugar; the named op functions are the real API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scalar_scale(other, -1.0))

    def __mul__(self, other):
        return elementwise_mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scalar_scale(self, -1.0)


def _prepare(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64, order="C", copy=True)
    if any(extent <= 0 for extent in arr.shape):
        raise ValueError(f"zero or negative extent in shape {arr.shape}")
    if not np.isfinite(arr.sum()):
        raise NonFiniteError("leaf tensor contains NaN or infinity")
    arr.setflags(write=False)
    return arr


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Validate, freeze and wrap ``data`` as a leaf tensor."""
    return Tensor(_prepare(data), requires_grad)


def constant(data) -> Tensor:
    return tensor(data, requires_grad=False)


class _Entry:
    """One tape node: output tensor plus how it was produced.

    ``vjp(g, need)`` works on raw ndarrays; ``vjp_ops(g, need)`` builds
    the same products out of recorded ops for double backward.  ``fwd``
    recomputes the output from a list of input values (replay).  Leaves
    have kind None and snapshot their value at adoption time.
    """

    __slots__ = ("tensor", "kind", "input_ids", "vjp", "vjp_ops", "fwd", "saved")

    def __init__(self, t, kind, input_ids, vjp, vjp_ops, fwd):
        self.tensor = t
        self.kind = kind
        self.input_ids = input_ids
        self.vjp = vjp
        self.vjp_ops = vjp_ops
        self.fwd = fwd
        self.saved = t.value


_STATE = threading.local()


def _stack():
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = _STATE.stack = []
    return stack


def _pause_depth() -> int:
    return getattr(_STATE, "pause", 0)


def _refresh_active():
    # _STATE.active caches "record ops should append to right now" so the
    # per-op hot path is a single attribute read.
    stack = _stack()
    _STATE.active = stack[-1] if stack and _pause_depth() == 0 else None


class no_grad:
    """Context manager: compute through ops without recording them."""

    def __enter__(self):
        _STATE.pause = _pause_depth() + 1
        _STATE.active = None
        return self

    def __exit__(self, *exc):
        _STATE.pause = _pause_depth() - 1
        _refresh_active()
        return False


class ComputationRecord:
    """Append-only tape of operations, usable as a context manager.

    While open, ops executed on the active record append entries and
    ``backward`` may run any number of times.  Leaving the ``with``
    block closes (consumes) the record: recording and backward then
    raise, but :meth:`replay` stays available.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self.consumers: list[list[int]] = []
        self._ids: dict[int, int] = {}
        self._memo: dict = {}
        self.closed = False

    def __enter__(self):
        if self.closed:
            raise RecordConsumedError("record already consumed")
        _stack().append(self)
        _refresh_active()
        return self

    def __exit__(self, *exc):
        _stack().pop()
        self.closed = True
        _refresh_active()
        return False

    def __len__(self):
        return len(self.entries)

    def node_id(self, t: Tensor) -> int:
        try:
            return self._ids[id(t)]
        except KeyError:
            raise RecordError("tensor is not on this record") from None

    def _adopt(self, t: Tensor) -> int:
        nid = self._ids.get(id(t))
        if nid is None:
            nid = len(self.entries)
            self._ids[id(t)] = nid
            self.entries.append(_Entry(t, None, (), None, None, None))
            self.consumers.append([])
        return nid

    def _append(self, kind, inputs, out, vjp, vjp_ops, fwd):
        ids = self._ids
        entries = self.entries
        consumers = self.consumers
        input_ids = []
        for t in inputs:
            tid = id(t)
            nid = ids.get(tid)
            if nid is None:
                nid = len(entries)
                ids[tid] = nid
                entries.append(_Entry(t, None, (), None, None, None))
                consumers.append([])
            input_ids.append(nid)
        out_id = len(entries)
        ids[id(out)] = out_id
        entries.append(_Entry(out, kind, tuple(input_ids), vjp, vjp_ops, fwd))
        consumers.append([])
        for j in input_ids:
            consumers[j].append(out_id)

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from saved leaf values, in order.

        Returns the recomputed value for each node.  Because all ops are
        deterministic pure functions of float64 buffers, the result is
        bit-identical to the originally recorded values.
        """
        values: list[np.ndarray] = []
        for entry in self.entries:
            if entry.kind is None:
                values.append(entry.saved)
            else:
                values.append(entry.fwd([values[i] for i in entry.input_ids]))
        return values


def _active() -> ComputationRecord | None:
    return getattr(_STATE, "active", None)


def _output(kind, inputs, out_val, vjp, vjp_ops, fwd) -> Tensor:
    if not np.isfinite(out_val.sum()):
        raise NonFiniteError(f"op '{kind}' produced a non-finite value")
    out_val.setflags(write=False)
    requires_grad = False
    for t in inputs:
        if t.requires_grad:
            requires_grad = True
            break
    out = Tensor(out_val, requires_grad)
    rec = getattr(_STATE, "active", None)
    if rec is not None:
        if rec.closed:
            raise RecordConsumedError("record already consumed")
        rec._append(kind, inputs, out, vjp, vjp_ops, fwd)
    elif _pause_depth() == 0:
        raise RecordError(f"op '{kind}' executed with no active ComputationRecord")
    return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    raise TypeError(f"expected Tensor, got {type(x).__name__}")


# ---------------------------------------------------------------------------
# primitive operations


def _transpose_memo(t: Tensor) -> Tensor:
    """transpose(t), shared per record.

    Vector-Jacobian products transpose the same weight matrices once per
    gradient step; memoizing keeps one tape entry per matrix instead of
    one per use.  Sharing is sound because recorded values are frozen.
    """
    rec = getattr(_STATE, "active", None)
    if rec is None:
        return transpose(t)
    hit = rec._memo.get(id(t))
    if hit is not None and hit[0] is t:
        return hit[1]
    tt = transpose(t)
    rec._memo[id(t)] = (t, tt)
    return tt


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    va, vb = a.value, b.value
    if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
        raise ValueError(f"matmul shape mismatch {va.shape} @ {vb.shape}")

    def vjp(g, need):
        return (g @ vb.T if need[0] else None, va.T @ g if need[1] else None)

    def vjp_ops(g, need):
        return (
            matmul(g, _transpose_memo(b)) if need[0] else None,
            matmul(_transpose_memo(a), g) if need[1] else None,
        )

    return _output("matmul", (a, b), va @ vb, vjp, vjp_ops, lambda xs: xs[0] @ xs[1])


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.value.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")

    def vjp(g, need):
        return (np.ascontiguousarray(g.T) if need[0] else None,)

    def vjp_ops(g, need):
        return (transpose(g) if need[0] else None,)

    out = np.ascontiguousarray(a.value.T)
    return _output("transpose", (a,), out, vjp, vjp_ops,
                   lambda xs: np.ascontiguousarray(xs[0].T))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.shape != b.value.shape:
        raise ValueError(f"add shape mismatch {a.value.shape} vs {b.value.shape}")

    def vjp(g, need):
        return (g if need[0] else None, g if need[1] else None)

    def vjp_ops(g, need):
        return (g if need[0] else None, g if need[1] else None)

    return _output("add", (a, b), a.value + b.value, vjp, vjp_ops,
                   lambda xs: xs[0] + xs[1])


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    va, vb = a.value, b.value
    if va.shape != vb.shape:
        raise ValueError(f"elementwise_mul shape mismatch {va.shape} vs {vb.shape}")

    def vjp(g, need):
        return (g * vb if need[0] else None, g * va if need[1] else None)

    def vjp_ops(g, need):
        return (
            elementwise_mul(g, b) if need[0] else None,
            elementwise_mul(g, a) if need[1] else None,
        )

    return _output("elementwise_mul", (a, b), va * vb, vjp, vjp_ops,
                   lambda xs: xs[0] * xs[1])


def scalar_scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def vjp(g, need):
        return (g * c if need[0] else None,)

    def vjp_ops(g, need):
        return (scalar_scale(g, c) if need[0] else None,)

    return _output("scalar_scale", (a,), a.value * c, vjp, vjp_ops,
                   lambda xs: xs[0] * c)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast over rows; x is (m, k), w (k, n), b (n,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    vx, vw, vb = x.value, w.value, b.value
    if vx.ndim != 2 or vw.ndim != 2 or vx.shape[1] != vw.shape[0]:
        raise ValueError(f"affine shape mismatch {vx.shape} @ {vw.shape}")
    if vb.shape != (vw.shape[1],):
        raise ValueError(f"affine bias shape {vb.shape} != ({vw.shape[1]},)")

    def vjp(g, need):
        return (
            g @ vw.T if need[0] else None,
            vx.T @ g if need[1] else None,
            g.sum(axis=0) if need[2] else None,
        )

    def vjp_ops(g, need):
        return (
            matmul(g, _transpose_memo(w)) if need[0] else None,
            matmul(_transpose_memo(x), g) if need[1] else None,
            sum_over_axis(g, 0) if need[2] else None,
        )

    return _output("affine", (x, w, b), vx @ vw + vb, vjp, vjp_ops,
                   lambda xs: xs[0] @ xs[1] + xs[2])


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # Stable in both tails: only ever exponentiates a non-positive argument.
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.value)
    out_t_holder = []

    def vjp(g, need):
        return (g * s * (1.0 - s) if need[0] else None,)

    def vjp_ops(g, need):
        if not need[0]:
            return (None,)
        st = out_t_holder[0]
        gs = elementwise_mul(g, st)
        return (add(gs, scalar_scale(elementwise_mul(gs, st), -1.0)),)

    out_t = _output("sigmoid", (a,), s, vjp, vjp_ops, lambda xs: _sigmoid(xs[0]))
    out_t_holder.append(out_t)
    return out_t


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.value)
    out_t_holder = []

    def vjp(g, need):
        return (g * (1.0 - t * t) if need[0] else None,)

    def vjp_ops(g, need):
        if not need[0]:
            return (None,)
        tt = out_t_holder[0]
        return (add(g, scalar_scale(elementwise_mul(elementwise_mul(g, tt), tt), -1.0)),)

    out_t = _output("tanh", (a,), t, vjp, vjp_ops, lambda xs: np.tanh(xs[0]))
    out_t_holder.append(out_t)
    return out_t


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    v = a.value
    mask = v > 0

    def vjp(g, need):
        return (g * mask if need[0] else None,)

    def vjp_ops(g, need):
        # The mask is constant w.r.t. the differentiated quantities.
        return (elementwise_mul(g, constant(mask.astype(np.float64))) if need[0] else None,)

    return _output("relu", (a,), np.maximum(v, 0.0), vjp, vjp_ops,
                   lambda xs: np.maximum(xs[0], 0.0))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    lo, hi = float(lo), float(hi)
    if not lo < hi:
        raise ValueError(f"clip bounds out of order: [{lo}, {hi}]")
    v = a.value
    mask = (v >= lo) & (v <= hi)

    def vjp(g, need):
        return (g * mask if need[0] else None,)

    def vjp_ops(g, need):
        return (elementwise_mul(g, constant(mask.astype(np.float64))) if need[0] else None,)

    return _output("clip", (a,), np.clip(v, lo, hi), vjp, vjp_ops,
                   lambda xs: np.clip(xs[0], lo, hi))


def sum_over_axis(a: Tensor, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    v = a.value
    if axis is not None:
        axis = int(axis)
        if not -v.ndim <= axis < v.ndim:
            raise ValueError(f"axis {axis} out of range for shape {v.shape}")
        axis = axis % v.ndim
    shape = v.shape

    def vjp(g, need):
        if not need[0]:
            return (None,)
        if axis is None:
            return (np.broadcast_to(g.reshape(()), shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    def vjp_ops(g, need):
        if not need[0]:
            return (None,)
        if axis is None:
            return (broadcast_to(reshape(g, (1,) * len(shape)), shape),)
        keep = list(g.value.shape)
        keep.insert(axis, 1)
        return (broadcast_to(reshape(g, tuple(keep)), shape),)

    out = v.sum() if axis is None else v.sum(axis=axis)
    out = np.asarray(out)
    return _output("sum_over_axis", (a,), out, vjp, vjp_ops,
                   lambda xs: np.asarray(xs[0].sum() if axis is None else xs[0].sum(axis=axis)))


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    v = a.value
    if int(np.prod(shape, dtype=np.int64)) != v.size:
        raise ValueError(f"cannot reshape {v.shape} to {shape}")
    orig = v.shape

    def vjp(g, need):
        return (g.reshape(orig) if need[0] else None,)

    def vjp_ops(g, need):
        return (reshape(g, orig) if need[0] else None,)

    return _output("reshape", (a,), v.reshape(shape), vjp, vjp_ops,
                   lambda xs: xs[0].reshape(shape))


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    v = a.value
    if np.broadcast_shapes(v.shape, shape) != shape:
        raise ValueError(f"cannot broadcast {v.shape} to {shape}")
    lead = len(shape) - v.ndim
    # Axes summed out on the way back: new leading ones plus expanded ones.
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(v.shape) if s == 1 and shape[i + lead] != 1
    )
    orig = v.shape

    def vjp(g, need):
        if not need[0]:
            return (None,)
        return (g.sum(axis=axes).reshape(orig) if axes else g.reshape(orig),)

    def vjp_ops(g, need):
        if not need[0]:
            return (None,)
        out = g
        for ax in sorted(axes, reverse=True):
            out = sum_over_axis(out, ax)
        return (reshape(out, orig),)

    out = np.ascontiguousarray(np.broadcast_to(v, shape))
    return _output("broadcast_to", (a,), out, vjp, vjp_ops,
                   lambda xs: np.ascontiguousarray(np.broadcast_to(xs[0], shape)))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of zero tensors")
    nd = ts[0].value.ndim
    if nd == 0:
        raise ValueError("concat expects tensors of rank >= 1")
    axis = int(axis) % nd
    for t in ts[1:]:
        if t.value.ndim != nd:
            raise ValueError("concat rank mismatch")
        for d in range(nd):
            if d != axis and t.value.shape[d] != ts[0].value.shape[d]:
                raise ValueError("concat extent mismatch off the concat axis")
    offsets = np.cumsum([0] + [t.value.shape[axis] for t in ts])

    def vjp(g, need):
        grads = []
        for k in range(len(ts)):
            if not need[k]:
                grads.append(None)
                continue
            idx = [slice(None)] * nd
            idx[axis] = slice(int(offsets[k]), int(offsets[k + 1]))
            grads.append(np.ascontiguousarray(g[tuple(idx)]))
        return grads

    def vjp_ops(g, need):
        return [
            slice_axis(g, axis, int(offsets[k]), int(offsets[k + 1])) if need[k] else None
            for k in range(len(ts))
        ]

    out = np.concatenate([t.value for t in ts], axis=axis)
    return _output("concat", tuple(ts), out, vjp, vjp_ops,
                   lambda xs: np.concatenate(xs, axis=axis))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    v = a.value
    axis = int(axis) % v.ndim
    start, stop = int(start), int(stop)
    if not 0 <= start < stop <= v.shape[axis]:
        raise ValueError(f"slice [{start}:{stop}] out of range on axis {axis} of {v.shape}")
    idx = [slice(None)] * v.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = v.shape

    def vjp(g, need):
        if not need[0]:
            return (None,)
        z = np.zeros(shape)
        z[idx] = g
        return (z,)

    def vjp_ops(g, need):
        if not need[0]:
            return (None,)
        pieces = []
        if start > 0:
            head = list(shape)
            head[axis] = start
            pieces.append(constant(np.zeros(head)))
        pieces.append(g)
        if stop < shape[axis]:
            tail = list(shape)
            tail[axis] = shape[axis] - stop
            pieces.append(constant(np.zeros(tail)))
        return (pieces[0] if len(pieces) == 1 else concat(pieces, axis),)

    return _output("slice", (a,), np.ascontiguousarray(v[idx]), vjp, vjp_ops,
                   lambda xs: np.ascontiguousarray(xs[0][idx]))


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("stack of zero tensors")
    shape = ts[0].value.shape
    for t in ts[1:]:
        if t.value.shape != shape:
            raise ValueError("stack shape mismatch")
    axis = int(axis) % (len(shape) + 1)

    def vjp(g, need):
        return [
            np.ascontiguousarray(np.take(g, k, axis=axis)) if need[k] else None
            for k in range(len(ts))
        ]

    def vjp_ops(g, need):
        return [
            reshape(slice_axis(g, axis, k, k + 1), shape) if need[k] else None
            for k in range(len(ts))
        ]

    out = np.stack([t.value for t in ts], axis=axis)
    return _output("stack", tuple(ts), out, vjp, vjp_ops,
                   lambda xs: np.stack(xs, axis=axis))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    v = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(v)

    def vjp(g, need):
        return (g / v if need[0] else None,)

    def vjp_ops(g, need):
        raise NotImplementedError("log has no differentiable backward; "
                                  "keep it outside create_graph regions")

    return _output("log", (a,), out, vjp, vjp_ops, lambda xs: np.log(xs[0]))


def _softmax_rows(v: np.ndarray) -> np.ndarray:
    m = v.max(axis=-1, keepdims=True)
    e = np.exp(v - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    s = _softmax_rows(a.value)

    def vjp(g, need):
        if not need[0]:
            return (None,)
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner),)

    def vjp_ops(g, need):
        raise NotImplementedError("softmax has no differentiable backward; "
                                  "keep it outside create_graph regions")

    return _output("softmax", (a,), s, vjp, vjp_ops, lambda xs: _softmax_rows(xs[0]))


def softmax_cross_entropy(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean over rows of cross-entropy between softmax(logits) and targets."""
    logits, targets = _as_tensor(logits), _as_tensor(targets)
    vl, vt = logits.value, targets.value
    if vl.ndim != 2 or vl.shape != vt.shape:
        raise ValueError(f"softmax_cross_entropy shape mismatch {vl.shape} vs {vt.shape}")
    rows = vl.shape[0]
    m = vl.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(vl - m).sum(axis=-1, keepdims=True))).reshape(-1)
    per_row = lse - (vl * vt).sum(axis=-1)
    out = np.asarray(per_row.mean())
    probs = _softmax_rows(vl)

    def vjp(g, need):
        scale = float(g.reshape(())) / rows
        return (
            (probs - vt) * scale if need[0] else None,
            -vl * scale if need[1] else None,
        )

    def vjp_ops(g, need):
        raise NotImplementedError("softmax_cross_entropy has no differentiable "
                                  "backward; keep it outside create_graph regions")

    def fwd(xs):
        x, t = xs
        mm = x.max(axis=-1, keepdims=True)
        ls = (mm + np.log(np.exp(x - mm).sum(axis=-1, keepdims=True))).reshape(-1)
        return np.asarray((ls - (x * t).sum(axis=-1)).mean())

    return _output("softmax_cross_entropy", (logits, targets), out, vjp, vjp_ops, fwd)


_CATALOG = {
    "matmul": matmul,
    "add": add,
    "elementwise_mul": elementwise_mul,
    "concat": concat,
    "sum_over_axis": sum_over_axis,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "affine": affine,
    "scalar_scale": scalar_scale,
    "slice": slice_axis,
    "stack": stack,
    "softmax_cross_entropy": softmax_cross_entropy,
    "softmax": softmax,
    "log": log,
    "reshape": reshape,
    "clip": clip,
    "transpose": transpose,
    "broadcast_to": broadcast_to,
}


def record(op_kind: str, *inputs, **static):
    """Dispatch an operation by catalog name onto the active record."""
    fn = _CATALOG.get(op_kind)
    if fn is None:
        raise UnknownOpError(f"unknown op_kind {op_kind!r}")
    return fn(*inputs, **static)


# ---------------------------------------------------------------------------
# backward


class GradientMap:
    """node_id -> gradient tensor for one backward pass."""

    def __init__(self, rec: ComputationRecord, grads: dict[int, Tensor]):
        self._rec = rec
        self._grads = grads

    def _key(self, key) -> int:
        return key if isinstance(key, int) else self._rec.node_id(key)

    def __getitem__(self, key) -> Tensor:
        return self._grads[self._key(key)]

    def get(self, key, default=None):
        return self._grads.get(self._key(key), default)

    def __contains__(self, key):
        return self._key(key) in self._grads

    def __len__(self):
        return len(self._grads)

    def items(self):
        return self._grads.items()


def backward(root: Tensor, wrt=None, create_graph: bool = False) -> GradientMap:
    """Accumulate d(root)/d(node) over the active record.

    With ``wrt`` given, only gradients for those tensors are returned and
    the walk skips branches that cannot reach them.  With
    ``create_graph=True`` every vector-Jacobian product is expressed in
    recorded ops, so returned gradients support a further backward.
    """
    rec = _active()
    if rec is None:
        stack = _stack()
        if stack and stack[-1].closed:
            raise RecordConsumedError("record already consumed")
        raise RecordError("backward requires an active ComputationRecord")
    root_id = rec.node_id(root)
    if root.value.size != 1:
        raise NonScalarRootError(f"root shape {root.value.shape} has size != 1")
    entries = rec.entries

    # Needed set: wrt nodes plus everything downstream of them, found by a
    # breadth-first sweep over consumer lists.  Touches only the affected
    # region of the record, not everything below root.
    needed = None
    if wrt is not None:
        wrt_ids = [rec.node_id(t) for t in wrt]
        consumers = rec.consumers
        needed = {nid for nid in wrt_ids if nid <= root_id}
        frontier = list(needed)
        while frontier:
            grown = []
            for j in frontier:
                for c in consumers[j]:
                    if c <= root_id and c not in needed:
                        needed.add(c)
                        grown.append(c)
            frontier = grown

    if create_graph:
        seed: object = constant(np.ones_like(root.value))
    else:
        seed = np.ones_like(root.value)
    grads: dict[int, object] = {root_id: seed}

    # Reverse walk in descending node id (a valid reverse topological
    # order); the heap holds only nodes actually reached by a gradient.
    heap = [-root_id]
    while heap:
        i = -heapq.heappop(heap)
        entry = entries[i]
        if entry.kind is None:
            continue
        g = grads[i]
        if needed is not None:
            need = [j in needed for j in entry.input_ids]
        else:
            need = [entries[j].tensor.requires_grad for j in entry.input_ids]
        if True not in need:
            continue
        gins = entry.vjp_ops(g, need) if create_graph else entry.vjp(g, need)
        for j, gin in zip(entry.input_ids, gins):
            if gin is None:
                continue
            prev = grads.get(j)
            if prev is None:
                grads[j] = gin
                heapq.heappush(heap, -j)
            elif create_graph:
                grads[j] = add(prev, gin)
            else:
                grads[j] = prev + gin

    def wrap(g) -> Tensor:
        arr = np.asarray(g)
        arr.setflags(write=False)
        return Tensor(arr)

    out: dict[int, Tensor] = {}
    if wrt is not None:
        for t, nid in zip(wrt, wrt_ids):
            g = grads.get(nid) if nid <= root_id else None
            if g is None:
                g = constant(np.zeros_like(t.value)) if create_graph else np.zeros_like(t.value)
            out[nid] = g if create_graph else wrap(g)
    else:
        for i, g in grads.items():
            if entries[i].tensor.requires_grad:
                out[i] = g if create_graph else wrap(g)
    return GradientMap(rec, out)


# ---------------------------------------------------------------------------
# finite-difference audit


def finite_difference_check(fn, at: Tensor, h: float = 1e-5) -> float:
    """Max relative error between backward and central differences.

    ``fn`` maps one tensor to a scalar tensor and must be built purely
    from catalog ops.  Also verifies ``fn`` is deterministic: two
    evaluations at the same point must agree bit for bit.
    """

    def evaluate(values: np.ndarray) -> float:
        with ComputationRecord():
            return fn(constant(values)).item()

    base = np.array(at.value, dtype=np.float64)
    y0 = evaluate(base)
    y1 = evaluate(base)
    if y0 != y1 or np.float64(y0).tobytes() != np.float64(y1).tobytes():
        raise RuntimeError("function is not deterministic under repeated evaluation")

    with ComputationRecord():
        x = tensor(base, requires_grad=True)
        grad = backward(fn(x), wrt=[x])[x].value

    worst = 0.0
    flat = base.reshape(-1)
    for k in range(flat.size):
        up = flat.copy()
        dn = flat.copy()
        up[k] += h
        dn[k] -= h
        fd = (evaluate(up.reshape(base.shape)) - evaluate(dn.reshape(base.shape))) / (2 * h)
        a = grad.reshape(-1)[k]
        worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
    return worst
