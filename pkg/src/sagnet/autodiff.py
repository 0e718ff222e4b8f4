"""Minimal reverse-mode automatic differentiation over dense nd-arrays.

A fixed primitive vocabulary (matmul, bias/elementwise arithmetic, stride-2
3D conv and transposed conv with kernel 4 / pad 1, sigmoid, tanh, exp, log,
square, clip, concat/slice on the last axis, sum, mean, reshape) is recorded
on an explicit tape; one backward pass per recording. Training runs in
float32; gradient checking uses float64.

Every primitive output is checked for NaN/Inf and trips NumericFault.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, NumericFault, ShapeError

_ids = itertools.count()
_state = threading.local()

KERNEL = 4
STRIDE = 2
PAD = 1


def _tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tensor:
    """Dense nd-array value, optionally recorded on the active tape."""

    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.requires_grad = requires_grad
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data: np.ndarray) -> Tensor:
    """A learnable leaf tensor (gradients are collected for it)."""
    return Tensor(np.ascontiguousarray(data), requires_grad=True)


def constant(value, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else np.float32
    return constant(value, dtype=dtype)


@dataclass
class Node:
    """One recorded primitive application."""

    op: str
    inputs: tuple[Tensor, ...]
    out_id: int
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Append-only record of primitive applications; one backward pass each."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if _tape() is not None:
            raise ContractError("a tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def gradients(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Reverse sweep from a scalar loss; returns grads aligned with params."""
        if self._consumed:
            raise ContractError("tape already consumed by a backward pass")
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        if not any(n.out_id == loss.id for n in self.nodes):
            raise ContractError("loss is not on this tape")
        self._consumed = True
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.out_id, None)
            if g is None:
                continue
            for t, gt in zip(node.inputs, node.backward(g)):
                if gt is None or not t.requires_grad:
                    continue
                acc = grads.get(t.id)
                grads[t.id] = gt if acc is None else acc + gt
        return [grads.get(p.id, np.zeros_like(p.data)) for p in params]


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar loss w.r.t. params, per recorded tape."""
    return tape.gradients(loss, params)


def _check_finite(op: str, out: np.ndarray) -> None:
    if not np.all(np.isfinite(out)):
        raise NumericFault(f"non-finite values produced by '{op}'")


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, bw) -> Tensor:
    _check_finite(op, out_data)
    tape = _tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=bool(needs))
    if needs:
        tape.nodes.append(Node(op, inputs, out.id, bw))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _elementwise_pair(op: str, a, b, fwd, bwd_a, bwd_b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    try:
        out = fwd(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"'{op}' on shapes {a.shape} and {b.shape}: {e}") from None
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        return (
            _unbroadcast(bwd_a(g, a.data, b.data), a.shape) if need_a else None,
            _unbroadcast(bwd_b(g, a.data, b.data), b.shape) if need_b else None,
        )

    return _record(op, (a, b), out, bw)


def add(a, b) -> Tensor:
    return _elementwise_pair(
        "add", a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g
    )


def sub(a, b) -> Tensor:
    return _elementwise_pair(
        "sub", a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g
    )


def mul(a, b) -> Tensor:
    return _elementwise_pair(
        "mul", a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x
    )


def bias_add(x, b) -> Tensor:
    """Alias of broadcasting add, kept for readability at call sites."""
    return add(x, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"'matmul' needs (n,m)@(m,p), got {a.shape} @ {b.shape}")
    out = a.data @ b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        return (
            g @ b.data.T if need_a else None,
            a.data.T @ g if need_b else None,
        )

    return _record("matmul", (a, b), out, bw)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (x,), out, bw)


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", (x,), out, bw)


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)  # overflow becomes inf and trips the finite check

    def bw(g):
        return (g * out,)

    return _record("exp", (x,), out, bw)


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def bw(g):
        return (g / x.data,)

    return _record("log", (x,), out, bw)


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = x.data * x.data

    def bw(g):
        return (2.0 * g * x.data,)

    return _record("square", (x,), out, bw)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values into [lo, hi]; gradient passes through the interior only."""
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)

    def bw(g):
        return (g * inside,)

    return _record("clip", (x,), out, bw)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    ts = tuple(as_tensor(t) for t in tensors)
    lead = ts[0].shape[:-1]
    if any(t.shape[:-1] != lead for t in ts):
        raise ShapeError(f"'concat' leading dims differ: {[t.shape for t in ts]}")
    out = np.concatenate([t.data for t in ts], axis=-1)
    sizes = [t.shape[-1] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=-1))

    return _record("concat", ts, out, bw)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Narrow the last axis to [start, stop)."""
    x = as_tensor(x)
    if not (0 <= start < stop <= x.shape[-1]):
        raise ShapeError(f"'slice_last' [{start}:{stop}] out of range for {x.shape}")
    out = np.ascontiguousarray(x.data[..., start:stop])

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return _record("slice_last", (x,), out, bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"'reshape' {x.shape} -> {shape} changes element count") from None
    in_shape = x.shape

    def bw(g):
        return (g.reshape(in_shape),)

    return _record("reshape", (x,), out, bw)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis))
    in_shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), in_shape).copy(),)

    return _record("sum", (x,), out, bw)


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.mean(axis=axis))
    in_shape = x.shape
    n = x.data.size if axis is None else in_shape[axis]

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / n, in_shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, in_shape).copy(),)

    return _record("mean", (x,), out, bw)


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# Stride-2 3D convolutions (kernel 4, pad 1): im2col gather + sparse scatter.
# Arrays are (batch, channels, d, d, d); output side is d/2 (conv) or 2d
# (transposed conv).
# ---------------------------------------------------------------------------


@dataclass
class _ConvGeometry:
    side: int
    out_side: int
    gather_idx: np.ndarray
    _scatter: dict = field(default_factory=dict)

    def scatter(self, dtype) -> sp.csr_matrix:
        key = np.dtype(dtype).name
        if key not in self._scatter:
            n = self.gather_idx.size
            padded = (self.side + 2 * PAD) ** 3
            self._scatter[key] = sp.csr_matrix(
                (np.ones(n, dtype=dtype), (self.gather_idx, np.arange(n))),
                shape=(padded, n),
            )
        return self._scatter[key]


_geometries: dict[int, _ConvGeometry] = {}


def conv_output_side(side: int) -> int:
    return (side + 2 * PAD - KERNEL) // STRIDE + 1


def _geometry(side: int) -> _ConvGeometry:
    geom = _geometries.get(side)
    if geom is None:
        out = conv_output_side(side)
        dp = side + 2 * PAD
        o = np.arange(out)
        t = np.arange(KERNEL)
        pos = (STRIDE * o[:, None] + t[None, :]).reshape(-1)  # (out*KERNEL,)
        pz, py, px = np.meshgrid(pos, pos, pos, indexing="ij")
        # output-major, tap-minor flat index into the padded volume
        flat = (
            (pz.reshape(out, KERNEL, out, KERNEL, out, KERNEL).transpose(0, 2, 4, 1, 3, 5) * dp
             + py.reshape(out, KERNEL, out, KERNEL, out, KERNEL).transpose(0, 2, 4, 1, 3, 5)) * dp
            + px.reshape(out, KERNEL, out, KERNEL, out, KERNEL).transpose(0, 2, 4, 1, 3, 5)
        )
        geom = _ConvGeometry(side, out, flat.reshape(-1).astype(np.int64))
        _geometries[side] = geom
    return geom


def _gather_cols(x: np.ndarray, geom: _ConvGeometry) -> np.ndarray:
    """(B, C, d, d, d) -> im2col matrix (B*out^3, C*KERNEL^3)."""
    b, c = x.shape[:2]
    out3 = geom.out_side**3
    taps = KERNEL**3
    xp = np.pad(x, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD), (PAD, PAD)))
    flat = xp.reshape(b * c, -1)
    cols = flat[:, geom.gather_idx].reshape(b, c, out3, taps)
    return cols.transpose(0, 2, 1, 3).reshape(b * out3, c * taps)


def _scatter_cols(cols: np.ndarray, b: int, c: int, geom: _ConvGeometry) -> np.ndarray:
    """Adjoint of _gather_cols: (B*out^3, C*taps) -> (B, C, d, d, d)."""
    out3 = geom.out_side**3
    taps = KERNEL**3
    side = geom.side
    dp = side + 2 * PAD
    rows = cols.reshape(b, out3, c, taps).transpose(0, 2, 1, 3).reshape(b * c, out3 * taps)
    padded = (geom.scatter(cols.dtype) @ rows.T).T.reshape(b, c, dp, dp, dp)
    return np.ascontiguousarray(padded[:, :, PAD:-PAD, PAD:-PAD, PAD:-PAD])


def conv3d(x: Tensor, w: Tensor) -> Tensor:
    """Stride-2 3D convolution; w is (C_out, C_in, 4, 4, 4)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 5 or w.data.ndim != 5 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"'conv3d' needs (B,Cin,d,d,d) and (Cout,Cin,4,4,4), got {x.shape}, {w.shape}")
    b, c_in, side = x.shape[0], x.shape[1], x.shape[2]
    if side % 2 or side < KERNEL // 2:
        raise ShapeError(f"'conv3d' needs an even spatial side >= 2, got {side}")
    c_out = w.shape[0]
    geom = _geometry(side)
    out_side, out3 = geom.out_side, geom.out_side**3
    cols = _gather_cols(x.data, geom)
    wflat = w.data.reshape(c_out, -1)
    out = (cols @ wflat.T).reshape(b, out3, c_out).transpose(0, 2, 1)
    out = np.ascontiguousarray(out).reshape(b, c_out, out_side, out_side, out_side)
    need_x, need_w = x.requires_grad, w.requires_grad

    def bw(g):
        gm = g.reshape(b, c_out, out3).transpose(0, 2, 1).reshape(b * out3, c_out)
        gw = (gm.T @ cols).reshape(w.shape) if need_w else None
        gx = _scatter_cols(gm @ wflat, b, c_in, geom) if need_x else None
        return gx, gw

    return _record("conv3d", (x, w), out, bw)


def conv3d_transpose(x: Tensor, w: Tensor) -> Tensor:
    """Stride-2 transposed 3D convolution; w is (C_in, C_out, 4, 4, 4)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 5 or w.data.ndim != 5 or x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"'conv3d_transpose' needs (B,Cin,d,d,d) and (Cin,Cout,4,4,4), got {x.shape}, {w.shape}"
        )
    b, c_in, in_side = x.shape[0], x.shape[1], x.shape[2]
    out_side = STRIDE * in_side
    c_out = w.shape[1]
    geom = _geometry(out_side)
    in3 = in_side**3
    xm = x.data.reshape(b, c_in, in3).transpose(0, 2, 1).reshape(b * in3, c_in)
    wflat = w.data.reshape(c_in, -1)  # (C_in, C_out*taps)
    cols = xm @ wflat  # (B*in3, C_out*taps)
    out = _scatter_cols(cols, b, c_out, geom)
    need_x, need_w = x.requires_grad, w.requires_grad

    def bw(g):
        gcols = _gather_cols(g, geom)  # (B*in3, C_out*taps)
        gx = None
        if need_x:
            gx = (gcols @ wflat.T).reshape(b, in3, c_in).transpose(0, 2, 1)
            gx = np.ascontiguousarray(gx).reshape(x.shape)
        gw = (xm.T @ gcols).reshape(w.shape) if need_w else None
        return gx, gw

    return _record("conv3d_transpose", (x, w), out, bw)


# ---------------------------------------------------------------------------
# Primitive registry and gradient checking
# ---------------------------------------------------------------------------

PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "bias_add": bias_add,
    "matmul": matmul,
    "conv3d": conv3d,
    "conv3d_transpose": conv3d_transpose,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "square": square,
    "clip": clip,
    "concat": concat,
    "slice_last": slice_last,
    "reshape": reshape,
    "sum": tsum,
    "mean": tmean,
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Dispatch a primitive by name (the op vocabulary is fixed)."""
    fn = PRIMITIVES.get(kind)
    if fn is None:
        raise ShapeError(f"unknown primitive '{kind}'")
    if kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float
    faults: list[str]

    @property
    def passed(self) -> bool:
        return not self.faults and all(e.passed for e in self.entries)

    def __str__(self) -> str:
        lines = [
            f"  {'PASS' if e.passed else 'FAIL'}  {e.name}: max rel err {e.max_rel_error:.3e}"
            for e in self.entries
        ]
        lines += [f"  FAULT {m}" for m in self.faults]
        lines.append(f"grad check: {'PASS' if self.passed else 'FAIL'} (tol {self.tolerance:g})")
        return "\n".join(lines)


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]] | Sequence[Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of fn() against central finite differences.

    fn must be a pure function of the given float64 parameters. Numeric
    faults during probing are reported, not raised.
    """
    named = [p if isinstance(p, tuple) else (f"param{i}", p) for i, p in enumerate(params)]
    tensors = [t for _, t in named]
    for name, t in named:
        if t.data.dtype != np.float64:
            raise ContractError(f"grad_check requires float64 params ({name} is {t.data.dtype})")

    with Tape() as tape:
        loss = fn()
    analytic = tape.gradients(loss, tensors)

    entries: list[GradCheckEntry] = []
    faults: list[str] = []
    for (name, t), a in zip(named, analytic):
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        fault = False
        for i in range(flat.size):
            orig = flat[i]
            h = step * max(1.0, abs(orig))
            try:
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                numeric[i] = (up - down) / (2 * h)
            except NumericFault as e:
                faults.append(f"{name}[{i}]: {e}")
                fault = True
                break
            finally:
                flat[i] = orig
        if fault:
            continue
        af = a.reshape(-1)
        denom = np.maximum(np.abs(af) + np.abs(numeric), 1e-6)
        rel = float(np.max(np.abs(af - numeric) / denom)) if flat.size else 0.0
        entries.append(GradCheckEntry(name, rel, rel < tolerance))
    return GradCheckReport(entries, tolerance, faults)
