"""Dense float64 tensor kernels with a reverse-mode tape and a finite-difference oracle.

The primitive set is exactly what the two model branches need: embedding
lookups, outer product, concatenation, same-padded 1-d convolution, masked
softmax, and the handful of scalar reductions the losses use. No
broadcasting, no higher-order derivatives.

Tensors are immutable values and safe to share across threads. A Tape and
the Parameters it touches belong to one training thread. Recording is
controlled per-thread via `recording(tape)`; forward math is identical with
or without an active tape, so inference paths produce bit-identical values
to taped training paths.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes invalid for a primitive."""


class TapeError(RuntimeError):
    """Backward called with an output that is not a scalar on the tape."""


class OracleInvalidError(RuntimeError):
    """The loss function is not deterministic, so finite differences are meaningless."""


# Checked mode: NaN rejection at tensor creation plus shape validation in
# every primitive. On by default; benchmarks switch it off.
_CHECKED = True

_tls = threading.local()


def checked_mode() -> bool:
    return _CHECKED


@contextlib.contextmanager
def unchecked():
    """Disable creation/shape validation (benchmarking only)."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = False
    try:
        yield
    finally:
        _CHECKED = prev


class Tensor:
    """Immutable dense array of 64-bit floats, row-major."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C")
        if _CHECKED and not np.all(np.isfinite(arr)):
            raise ValueError("Tensor: non-finite element at creation")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt an array the caller owns (no copy)."""
        t = object.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if _CHECKED and not np.all(np.isfinite(arr)):
            raise ValueError("Tensor: non-finite element produced")
        arr.setflags(write=False)
        object.__setattr__(t, "data", arr)
        return t

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls._wrap(np.zeros(shape, dtype=np.float64))

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={np.array2string(self.data, threshold=8)})"


class Parameter:
    """A named leaf tensor with an owned gradient buffer.

    `grad` is exactly zero after `zero_grad` and before any backward pass;
    backward passes accumulate (running backward twice doubles it).
    Non-trainable parameters (fixed word embeddings) never receive gradient.
    """

    __slots__ = ("value", "grad", "trainable", "name")

    def __init__(self, value, trainable: bool = True, name: str = ""):
        if not isinstance(value, Tensor):
            value = Tensor(value)
        self.value = value
        self.grad = np.zeros(value.shape, dtype=np.float64)
        self.trainable = trainable
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def assign(self, new_value) -> None:
        """Replace the value; shape must not change."""
        t = new_value if isinstance(new_value, Tensor) else Tensor(new_value)
        if t.shape != self.value.shape:
            raise ShapeError(
                f"assign: parameter {self.name!r} has shape {self.value.shape}, got {t.shape}"
            )
        self.value = t

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def zero_grads(params) -> None:
    for p in _iter_params(params):
        p.zero_grad()


def _iter_params(params):
    if isinstance(params, dict):
        return params.values()
    return params


@dataclass
class Record:
    """One primitive application: (kind, input refs, output ref, saved context)."""

    kind: str
    inputs: tuple
    output: Tensor
    ctx: tuple


@dataclass
class Tape:
    """Topologically ordered list of primitive records."""

    records: list = field(default_factory=list)
    produced: set = field(default_factory=set)  # id() of every output Tensor

    def append(self, rec: Record) -> None:
        self.records.append(rec)
        self.produced.add(id(rec.output))

    def __len__(self) -> int:
        return len(self.records)

    def replay(self) -> None:
        """Re-evaluate every record and require bit-identical outputs."""
        for rec in self.records:
            vals = [_value(x) for x in rec.inputs]
            again = _REPLAY[rec.kind](vals, rec.ctx)
            if again.shape != rec.output.data.shape or not np.array_equal(
                again, rec.output.data
            ):
                raise TapeError(f"replay: {rec.kind} output diverged from stored value")


@contextlib.contextmanager
def recording(tape: Tape):
    """Make `tape` the active tape for this thread."""
    prev = getattr(_tls, "tape", None)
    _tls.tape = tape
    try:
        yield tape
    finally:
        _tls.tape = prev


@contextlib.contextmanager
def paused_recording():
    """Suspend taping (inference paths inside a training loop)."""
    prev = getattr(_tls, "tape", None)
    _tls.tape = None
    try:
        yield
    finally:
        _tls.tape = prev


def active_tape():
    return getattr(_tls, "tape", None)


# --- op counter -------------------------------------------------------------
#
# Counts every primitive invocation and the number of output elements, per
# kind. Always on (one dict update per call); the serving-path isolation
# check and the O(K^2) cost assertion read it.

_op_calls: dict = {}
_op_elems: dict = {}


def reset_op_counts() -> None:
    _op_calls.clear()
    _op_elems.clear()


def op_counts() -> dict:
    """Snapshot: kind -> (calls, total output elements)."""
    return {k: (_op_calls[k], _op_elems[k]) for k in _op_calls}


def _value(x) -> np.ndarray:
    return x.value.data if isinstance(x, Parameter) else x.data


def _emit(kind: str, inputs: tuple, out: np.ndarray, ctx: tuple = ()) -> Tensor:
    t = Tensor._wrap(out)
    _op_calls[kind] = _op_calls.get(kind, 0) + 1
    _op_elems[kind] = _op_elems.get(kind, 0) + t.data.size
    tape = getattr(_tls, "tape", None)
    if tape is not None:
        tape.append(Record(kind, inputs, t, ctx))
    return t


def _shape_of(x) -> tuple:
    return _value(x).shape


def _require(cond: bool, kind: str, msg: str) -> None:
    if not cond:
        raise ShapeError(f"{kind}: {msg}")


# --- primitives -------------------------------------------------------------


def add(x, y) -> Tensor:
    a, b = _value(x), _value(y)
    if _CHECKED:
        _require(a.shape == b.shape, "add", f"shapes {a.shape} and {b.shape} differ")
    return _emit("add", (x, y), a + b)


def mul(x, y) -> Tensor:
    """Elementwise product (no broadcasting)."""
    a, b = _value(x), _value(y)
    if _CHECKED:
        _require(a.shape == b.shape, "mul", f"shapes {a.shape} and {b.shape} differ")
    return _emit("mul", (x, y), a * b)


def scale(x, c: float) -> Tensor:
    a = _value(x)
    return _emit("scale", (x,), a * float(c), (float(c),))


def square(x) -> Tensor:
    a = _value(x)
    return _emit("square", (x,), a * a)


def exp(x) -> Tensor:
    a = _value(x)
    return _emit("exp", (x,), np.exp(a))


def relu(x) -> Tensor:
    a = _value(x)
    return _emit("relu", (x,), np.maximum(a, 0.0))


def mean(x) -> Tensor:
    a = _value(x)
    if _CHECKED:
        _require(a.size > 0, "mean", "empty input")
    return _emit("mean", (x,), np.asarray(np.mean(a)))


def asum(x) -> Tensor:
    """Sum of all elements to a scalar."""
    a = _value(x)
    return _emit("sum", (x,), np.asarray(np.sum(a)))


def dot(x, y) -> Tensor:
    a, b = _value(x), _value(y)
    if _CHECKED:
        _require(
            a.ndim == 1 and b.ndim == 1 and a.shape == b.shape,
            "dot",
            f"need equal-length vectors, got {a.shape} and {b.shape}",
        )
    return _emit("dot", (x, y), np.asarray(np.dot(a, b)))


def matvec(x, y) -> Tensor:
    a, b = _value(x), _value(y)
    if _CHECKED:
        _require(
            a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0],
            "matvec",
            f"need (m,n) @ (n,), got {a.shape} and {b.shape}",
        )
    return _emit("matvec", (x, y), a @ b)


def matmul(x, y) -> Tensor:
    a, b = _value(x), _value(y)
    if _CHECKED:
        _require(
            a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0],
            "matmul",
            f"need (m,n) @ (n,p), got {a.shape} and {b.shape}",
        )
    return _emit("matmul", (x, y), a @ b)


def transpose(x) -> Tensor:
    a = _value(x)
    if _CHECKED:
        _require(a.ndim == 2, "transpose", f"need a matrix, got shape {a.shape}")
    return _emit("transpose", (x,), np.ascontiguousarray(a.T))


def outer_product(x, y) -> Tensor:
    a, b = _value(x), _value(y)
    if _CHECKED:
        _require(
            a.ndim == 1 and b.ndim == 1,
            "outer_product",
            f"need two vectors, got {a.shape} and {b.shape}",
        )
    return _emit("outer_product", (x, y), np.outer(a, b))


def flatten(x) -> Tensor:
    """Row-major flatten to a vector."""
    a = _value(x)
    return _emit("flatten", (x,), a.reshape(-1), (a.shape,))


def concat(parts) -> Tensor:
    parts = tuple(parts)
    vals = [_value(p) for p in parts]
    if _CHECKED:
        _require(len(vals) > 0, "concat", "no inputs")
        _require(all(v.ndim == 1 for v in vals), "concat", "all inputs must be vectors")
    lengths = tuple(v.shape[0] for v in vals)
    return _emit("concat", parts, np.concatenate(vals), (lengths,))


def pack(scalars) -> Tensor:
    """Stack scalar tensors into a vector."""
    parts = tuple(scalars)
    vals = [_value(p) for p in parts]
    if _CHECKED:
        _require(len(vals) > 0, "pack", "no inputs")
        _require(all(v.ndim == 0 for v in vals), "pack", "all inputs must be scalars")
    return _emit("pack", parts, np.array(vals))


def lookup_row(table, idx: int) -> Tensor:
    """Row `idx` of a 2-d leaf table; gradient lands only in that row."""
    a = _value(table)
    if a.ndim != 2:
        raise ShapeError(f"lookup_row: need a matrix, got shape {a.shape}")
    idx = int(idx)
    if not 0 <= idx < a.shape[0]:
        raise IndexError(f"lookup_row: row {idx} out of range [0, {a.shape[0]})")
    _check_leaf_table("lookup_row", table)
    return _emit("lookup_row", (table,), a[idx].copy(), (idx,))


def gather_rows(table, ids) -> Tensor:
    """Rows `ids` of a 2-d leaf table, stacked in order."""
    a = _value(table)
    if a.ndim != 2:
        raise ShapeError(f"gather_rows: need a matrix, got shape {a.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[0]):
        bad = ids[(ids < 0) | (ids >= a.shape[0])][0]
        raise IndexError(f"gather_rows: row {int(bad)} out of range [0, {a.shape[0]})")
    _check_leaf_table("gather_rows", table)
    return _emit("gather_rows", (table,), a[ids].copy(), (ids,))


def _check_leaf_table(kind: str, table) -> None:
    tape = getattr(_tls, "tape", None)
    if tape is not None and not isinstance(table, Parameter):
        if id(table) in tape.produced:
            raise TapeError(f"{kind}: table must be a leaf, not a taped intermediate")


def conv1d_same(h, filters, bias) -> Tensor:
    """Same-padded 1-d convolution over a (L, D) sequence.

    `filters` is a (F, w, D) bank with w odd; zero padding of w//2 rows on
    each side keeps the output length at L. Output is (L, F), pre-activation
    (bias added, no nonlinearity).
    """
    a, wb, b = _value(h), _value(filters), _value(bias)
    if _CHECKED:
        _require(a.ndim == 2, "conv1d_same", f"input must be (L,D), got {a.shape}")
        _require(
            wb.ndim == 3 and wb.shape[2] == a.shape[1],
            "conv1d_same",
            f"filter bank must be (F,w,D={a.shape[1]}), got {wb.shape}",
        )
        _require(wb.shape[1] % 2 == 1, "conv1d_same", f"width {wb.shape[1]} must be odd")
        _require(
            b.ndim == 1 and b.shape[0] == wb.shape[0],
            "conv1d_same",
            f"bias must be (F={wb.shape[0]},), got {b.shape}",
        )
        _require(a.shape[0] >= 1, "conv1d_same", "empty sequence")
    return _emit("conv1d_same", (h, filters, bias), _conv1d_same_raw(a, wb, b))


def _conv1d_same_raw(a: np.ndarray, wb: np.ndarray, b: np.ndarray) -> np.ndarray:
    length, dim = a.shape
    width = wb.shape[1]
    pad = width // 2
    hpad = np.zeros((length + 2 * pad, dim), dtype=np.float64)
    hpad[pad : pad + length] = a
    out = np.zeros((length, wb.shape[0]), dtype=np.float64)
    for off in range(width):
        out += hpad[off : off + length] @ wb[:, off, :].T
    return out + b


def masked_softmax(logits, mask) -> Tensor:
    """Softmax over unmasked positions; exact zeros at masked positions.

    Masked positions are excluded outright (not large-negative logits), and
    the max unmasked logit is subtracted before exponentiation.
    """
    a = _value(logits)
    m = np.asarray(mask, dtype=bool)
    if a.ndim != 1 or m.shape != a.shape:
        raise ShapeError(
            f"masked_softmax: need vector logits with same-shape mask, got {a.shape} and {m.shape}"
        )
    if not m.any():
        raise ShapeError("masked_softmax: all positions masked")
    out = np.zeros_like(a)
    shifted = a[m] - a[m].max()
    e = np.exp(shifted)
    out[m] = e / e.sum()
    return _emit("masked_softmax", (logits,), out, (m,))


# Spec-level dispatch surface: kind name -> callable.
PRIMITIVES = {
    "add": add,
    "mul": mul,
    "scale": scale,
    "square": square,
    "exp": exp,
    "relu": relu,
    "mean": mean,
    "sum": asum,
    "dot": dot,
    "matvec": matvec,
    "matmul": matmul,
    "transpose": transpose,
    "outer_product": outer_product,
    "flatten": flatten,
    "concat": concat,
    "pack": pack,
    "lookup_row": lookup_row,
    "gather_rows": gather_rows,
    "conv1d_same": conv1d_same,
    "masked_softmax": masked_softmax,
}


def primitive_forward(kind: str, *args, **kwargs) -> Tensor:
    """Apply a primitive by kind name."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise KeyError(f"unknown primitive kind {kind!r}") from None
    return fn(*args, **kwargs)


# --- replay table (forward re-evaluation from stored inputs) ----------------

_REPLAY = {
    "add": lambda v, c: v[0] + v[1],
    "mul": lambda v, c: v[0] * v[1],
    "scale": lambda v, c: v[0] * c[0],
    "square": lambda v, c: v[0] * v[0],
    "exp": lambda v, c: np.exp(v[0]),
    "relu": lambda v, c: np.maximum(v[0], 0.0),
    "mean": lambda v, c: np.asarray(np.mean(v[0])),
    "sum": lambda v, c: np.asarray(np.sum(v[0])),
    "dot": lambda v, c: np.asarray(np.dot(v[0], v[1])),
    "matvec": lambda v, c: v[0] @ v[1],
    "matmul": lambda v, c: v[0] @ v[1],
    "transpose": lambda v, c: np.ascontiguousarray(v[0].T),
    "outer_product": lambda v, c: np.outer(v[0], v[1]),
    "flatten": lambda v, c: v[0].reshape(-1),
    "concat": lambda v, c: np.concatenate(v),
    "pack": lambda v, c: np.array(v),
    "lookup_row": lambda v, c: v[0][c[0]].copy(),
    "gather_rows": lambda v, c: v[0][c[0]].copy(),
    "conv1d_same": lambda v, c: _conv1d_same_raw(v[0], v[1], v[2]),
    "masked_softmax": lambda v, c: _masked_softmax_replay(v[0], c[0]),
}


def _masked_softmax_replay(a: np.ndarray, m: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    e = np.exp(a[m] - a[m].max())
    out[m] = e / e.sum()
    return out


# --- vector-Jacobian products ------------------------------------------------
#
# Each entry maps (record, output adjoint) to per-input adjoints aligned with
# record.inputs. An entry may be None (no gradient, e.g. through integer ids)
# or the marker ("rows", ids, row_grads) for sparse table accumulation.

def _vjp_conv1d_same(rec: Record, adj: np.ndarray):
    a, wb, _ = (_value(x) for x in rec.inputs)
    length, dim = a.shape
    width = wb.shape[1]
    pad = width // 2
    hpad = np.zeros((length + 2 * pad, dim), dtype=np.float64)
    hpad[pad : pad + length] = a
    d_w = np.empty_like(wb)
    d_hpad = np.zeros_like(hpad)
    for off in range(width):
        d_w[:, off, :] = adj.T @ hpad[off : off + length]
        d_hpad[off : off + length] += adj @ wb[:, off, :]
    return [d_hpad[pad : pad + length], d_w, adj.sum(axis=0)]


def _vjp_masked_softmax(rec: Record, adj: np.ndarray):
    p = rec.output.data
    inner = np.dot(adj, p)
    return [p * (adj - inner)]


def _vjp_concat(rec: Record, adj: np.ndarray):
    (lengths,) = rec.ctx
    out, start = [], 0
    for n in lengths:
        out.append(adj[start : start + n])
        start += n
    return out


_VJPS = {
    "add": lambda rec, adj: [adj, adj],
    "mul": lambda rec, adj: [adj * _value(rec.inputs[1]), adj * _value(rec.inputs[0])],
    "scale": lambda rec, adj: [adj * rec.ctx[0]],
    "square": lambda rec, adj: [2.0 * _value(rec.inputs[0]) * adj],
    "exp": lambda rec, adj: [adj * rec.output.data],
    "relu": lambda rec, adj: [adj * (_value(rec.inputs[0]) > 0.0)],
    "mean": lambda rec, adj: [
        np.full(_value(rec.inputs[0]).shape, float(adj) / _value(rec.inputs[0]).size)
    ],
    "sum": lambda rec, adj: [np.full(_value(rec.inputs[0]).shape, float(adj))],
    "dot": lambda rec, adj: [
        float(adj) * _value(rec.inputs[1]),
        float(adj) * _value(rec.inputs[0]),
    ],
    "matvec": lambda rec, adj: [
        np.outer(adj, _value(rec.inputs[1])),
        _value(rec.inputs[0]).T @ adj,
    ],
    "matmul": lambda rec, adj: [
        adj @ _value(rec.inputs[1]).T,
        _value(rec.inputs[0]).T @ adj,
    ],
    "transpose": lambda rec, adj: [np.ascontiguousarray(adj.T)],
    "outer_product": lambda rec, adj: [
        adj @ _value(rec.inputs[1]),
        adj.T @ _value(rec.inputs[0]),
    ],
    "flatten": lambda rec, adj: [adj.reshape(rec.ctx[0])],
    "concat": _vjp_concat,
    "pack": lambda rec, adj: [np.asarray(adj[i]) for i in range(len(rec.inputs))],
    "lookup_row": lambda rec, adj: [("rows", np.asarray([rec.ctx[0]]), adj[None, :])],
    "gather_rows": lambda rec, adj: [("rows", rec.ctx[0], adj)],
    "conv1d_same": _vjp_conv1d_same,
    "masked_softmax": _vjp_masked_softmax,
}


def backward(tape: Tape, output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into every trainable Parameter's grad.

    `output` must be a scalar produced on `tape`. Adjoints of constant leaf
    tensors are discarded; non-trainable parameters receive nothing.
    """
    if not isinstance(output, Tensor) or output.data.ndim != 0:
        raise TapeError("backward: output must be a scalar Tensor")
    if id(output) not in tape.produced:
        raise TapeError("backward: output was not produced on this tape")

    adjoints: dict[int, np.ndarray] = {id(output): np.asarray(1.0)}
    for rec in reversed(tape.records):
        adj = adjoints.pop(id(rec.output), None)
        if adj is None:
            continue
        for inp, g in zip(rec.inputs, _VJPS[rec.kind](rec, adj)):
            if g is None:
                continue
            if isinstance(inp, Parameter):
                if not inp.trainable:
                    continue
                if isinstance(g, tuple) and g[0] == "rows":
                    np.add.at(inp.grad, g[1], g[2])
                else:
                    inp.grad += g
            else:
                if isinstance(g, tuple) and g[0] == "rows":
                    continue  # constant table leaf
                key = id(inp)
                if key in tape.produced:
                    if key in adjoints:
                        adjoints[key] = adjoints[key] + g
                    else:
                        adjoints[key] = g


# --- finite-difference oracle -------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_coord: tuple
    analytic: float
    numeric: float
    coords_checked: int


@dataclass
class GradCheckReport:
    step: float
    tol: float
    entries: list

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.max_rel_err <= self.tol for e in self.entries)

    def lines(self) -> list:
        out = []
        for e in self.entries:
            verdict = "ok" if e.max_rel_err <= self.tol else "FAIL"
            out.append(
                f"{verdict:4s} {e.name:24s} max_rel_err={e.max_rel_err:.3e} "
                f"at {e.worst_coord} (analytic={e.analytic:.6g}, numeric={e.numeric:.6g}, "
                f"{e.coords_checked} coords)"
            )
        return out

    def as_dict(self) -> dict:
        return {
            "step": self.step,
            "tol": self.tol,
            "passed": self.passed,
            "max_rel_err": self.max_rel_err,
            "parameters": [
                {
                    "name": e.name,
                    "max_rel_err": e.max_rel_err,
                    "worst_coord": list(e.worst_coord),
                    "analytic": e.analytic,
                    "numeric": e.numeric,
                    "coords_checked": e.coords_checked,
                }
                for e in self.entries
            ],
        }


def finite_diff_check(
    loss_fn,
    params,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of `loss_fn` against central differences.

    `loss_fn` takes no arguments, reads the current parameter values and
    returns a scalar Tensor. It must be deterministic: two evaluations at
    the same point must agree bitwise, otherwise OracleInvalidError.

    Per parameter the report carries max over sampled coordinates of
    |analytic - central| / max(1, |analytic|); the check passes iff every
    entry is <= tol.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    named = _named_params(params)

    v1 = float(loss_fn())
    v2 = float(loss_fn())
    if v1 != v2:
        raise OracleInvalidError(
            f"loss is not deterministic: {v1!r} != {v2!r} on identical evaluations"
        )

    zero_grads([p for _, p in named])
    tape = Tape()
    with recording(tape):
        out = loss_fn()
    backward(tape, out)
    analytic = {name: p.grad.copy() for name, p in named}
    zero_grads([p for _, p in named])

    rng = np.random.default_rng(seed)
    entries = []
    for name, p in named:
        if not p.trainable:
            continue
        base = p.value
        flat_size = base.data.size
        if max_coords is not None and flat_size > max_coords:
            coords = rng.choice(flat_size, size=max_coords, replace=False)
        else:
            coords = np.arange(flat_size)
        worst = (0.0, (), 0.0, 0.0)
        a_flat = analytic[name].reshape(-1)
        for c in coords:
            c = int(c)
            plus = base.data.reshape(-1).copy()
            plus[c] += h
            p.assign(Tensor._wrap(plus.reshape(base.shape)))
            f_plus = float(loss_fn())
            minus = base.data.reshape(-1).copy()
            minus[c] -= h
            p.assign(Tensor._wrap(minus.reshape(base.shape)))
            f_minus = float(loss_fn())
            p.value = base
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(a_flat[c])
            rel = abs(a - numeric) / max(1.0, abs(a))
            if rel >= worst[0]:
                worst = (rel, np.unravel_index(c, base.shape or (1,)), a, numeric)
        entries.append(
            GradCheckEntry(
                name=name,
                max_rel_err=worst[0],
                worst_coord=tuple(int(i) for i in worst[1]),
                analytic=worst[2],
                numeric=worst[3],
                coords_checked=len(coords),
            )
        )
    return GradCheckReport(step=h, tol=tol, entries=entries)


def _named_params(params):
    if isinstance(params, dict):
        return list(params.items())
    out = []
    for i, p in enumerate(params):
        out.append((p.name or f"param{i}", p))
    return out
