"""Dense tensors with a reverse-mode gradient tape.

Every differentiable primitive is a plain function in this module.  When a
:class:`Tape` is active and any input requires a gradient, the primitive
appends one record to the tape; :meth:`Tape.backward` replays those records
in reverse, dispatching to the backward formula registered under the op's
name in :data:`BACKWARD`.  Outside a tape the primitives are ordinary numpy
computations, which is what inference uses.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64
LN_EPS = 1e-5
BCE_CLAMP = 1e-7


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(TRAIN_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # Operator sugar for the handful of binary ops the model uses.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class OpRecord:
    name: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    saved: dict = field(default_factory=dict)


BackwardFn = Callable[[np.ndarray, OpRecord], Sequence[np.ndarray | None]]
BACKWARD: dict[str, BackwardFn] = {}

_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed primitives.

    Tapes are confined to the thread that entered them; independent tapes on
    different threads never share state.
    """

    def __init__(self):
        self.records: list[OpRecord] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, rec: OpRecord) -> None:
        self.records.append(rec)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

        Returns the gradients of the leaves keyed by ``id``.  Leaves that were
        used in the forward pass but received no gradient get zeros.
        """
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(r.out) for r in self.records}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            for t in rec.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = BACKWARD[rec.name](g, rec)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise DimensionError(
                        f"backward of {rec.name} returned shape {gi.shape} for input {t.shape}"
                    )
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        out = {}
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            g = g.astype(leaf.data.dtype, copy=False)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            out[key] = g
        return out


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} produced non-finite values")


def _emit(name: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], **saved) -> Tensor:
    _check_finite(name, out_data)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(OpRecord(name, out, inputs, saved))
    return out


def _register(name: str):
    def deco(fn: BackwardFn) -> BackwardFn:
        BACKWARD[name] = fn
        return fn

    return deco


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _ndim(op: str, t: Tensor, nd: int) -> None:
    if t.data.ndim != nd:
        raise DimensionError(f"{op}: expected a {nd}-d tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _ndim("matmul", a, 2)
    _ndim("matmul", b, 2)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b))


@_register("matmul")
def _matmul_bw(g, rec):
    a, b = rec.inputs
    return g @ b.data.T, a.data.T @ g


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Row-wise affine map ``x @ weight.T + bias`` with weight stored out x in."""
    _ndim("linear", x, 2)
    _ndim("linear", weight, 2)
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[1]} != weight fan-in {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is None:
        return _emit("linear", out, (x, weight))
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    return _emit("linear", out + bias.data, (x, weight, bias))


@_register("linear")
def _linear_bw(g, rec):
    x, w = rec.inputs[:2]
    grads = [g @ w.data, g.T @ x.data]
    if len(rec.inputs) == 3:
        grads.append(g.sum(axis=0))
    return grads


def transpose(x: Tensor) -> Tensor:
    _ndim("transpose", x, 2)
    return _emit("transpose", np.ascontiguousarray(x.data.T), (x,))


@_register("transpose")
def _transpose_bw(g, rec):
    return (g.T,)


# ---------------------------------------------------------------------------
# Pointwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b))


@_register("add")
def _add_bw(g, rec):
    return g, g


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b))


@_register("sub")
def _sub_bw(g, rec):
    return g, -g


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b))


@_register("mul")
def _mul_bw(g, rec):
    a, b = rec.inputs
    return g * b.data, g * a.data


def scale(x: Tensor, c: float) -> Tensor:
    return _emit("scale", x.data * x.data.dtype.type(c), (x,), c=c)


@_register("scale")
def _scale_bw(g, rec):
    return (g * g.dtype.type(rec.saved["c"]),)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-n vector to every row of an m x n matrix."""
    _ndim("add_bias", x, 2)
    if bias.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: bias {bias.shape} does not match rows of {x.shape}")
    return _emit("add_bias", x.data + bias.data, (x, bias))


@_register("add_bias")
def _add_bias_bw(g, rec):
    return g, g.sum(axis=0)


def tanh(x: Tensor) -> Tensor:
    return _emit("tanh", np.tanh(x.data), (x,))


@_register("tanh")
def _tanh_bw(g, rec):
    y = rec.out.data
    return (g * (1 - y * y),)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1 / (1 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    return _emit("sigmoid", _sigmoid(x.data), (x,))


@_register("sigmoid")
def _sigmoid_bw(g, rec):
    y = rec.out.data
    return (g * y * (1 - y),)


def relu(x: Tensor) -> Tensor:
    return _emit("relu", np.maximum(x.data, 0), (x,))


@_register("relu")
def _relu_bw(g, rec):
    return (g * (rec.inputs[0].data > 0),)


def elementwise(op: str, *inputs: Tensor) -> Tensor:
    """Dispatch by name to one of the pointwise primitives."""
    table = {"add": add, "mul": mul, "sub": sub, "tanh": tanh, "sigmoid": sigmoid, "relu": relu}
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    _ndim("softmax_rows", x, 2)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    return _emit("softmax_rows", e / e.sum(axis=1, keepdims=True), (x,))


@_register("softmax_rows")
def _softmax_rows_bw(g, rec):
    y = rec.out.data
    return (y * (g - (g * y).sum(axis=1, keepdims=True)),)


def softmax_cols(x: Tensor) -> Tensor:
    """Softmax down each column (over rows)."""
    return transpose(softmax_rows(transpose(x)))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    _ndim("layer_norm", x, 2)
    d = x.shape[1]
    if d < 2:
        raise DimensionError("layer_norm needs at least 2 features per row")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return _emit("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), xhat=xhat, inv=inv)


@_register("layer_norm")
def _layer_norm_bw(g, rec):
    _, gain, _ = rec.inputs
    xhat, inv = rec.saved["xhat"], rec.saved["inv"]
    gx = g * gain.data
    dx = inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


# ---------------------------------------------------------------------------
# Shape plumbing
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _emit("reshape", x.data.reshape(shape), (x,))


@_register("reshape")
def _reshape_bw(g, rec):
    return (g.reshape(rec.inputs[0].shape),)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows: column counts differ {sorted(widths)}")
    return _emit("concat_rows", np.concatenate([p.data for p in parts], axis=0), tuple(parts))


@_register("concat_rows")
def _concat_rows_bw(g, rec):
    cuts = np.cumsum([p.shape[0] for p in rec.inputs])[:-1]
    return np.split(g, cuts, axis=0)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    heights = {p.shape[0] for p in parts}
    if len(heights) != 1:
        raise DimensionError(f"concat_cols: row counts differ {sorted(heights)}")
    return _emit("concat_cols", np.concatenate([p.data for p in parts], axis=1), tuple(parts))


@_register("concat_cols")
def _concat_cols_bw(g, rec):
    cuts = np.cumsum([p.shape[1] for p in rec.inputs])[:-1]
    return np.split(g, cuts, axis=1)


def take_rows(x: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.intp).reshape(-1)
    return _emit("take_rows", x.data[idx], (x,), index=idx)


@_register("take_rows")
def _take_rows_bw(g, rec):
    out = np.zeros_like(rec.inputs[0].data)
    np.add.at(out, rec.saved["index"], g)
    return (out,)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _ndim("slice_cols", x, 2)
    return _emit("slice_cols", np.ascontiguousarray(x.data[:, start:stop]), (x,), start=start, stop=stop)


@_register("slice_cols")
def _slice_cols_bw(g, rec):
    out = np.zeros_like(rec.inputs[0].data)
    out[:, rec.saved["start"] : rec.saved["stop"]] = g
    return (out,)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    return _emit("sum_all", np.asarray(x.data.sum(), dtype=x.dtype).reshape(()), (x,))


@_register("sum_all")
def _sum_all_bw(g, rec):
    return (np.broadcast_to(g, rec.inputs[0].shape).copy(),)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def sum_cols(x: Tensor) -> Tensor:
    """Row sums of an m x n matrix, shape (m,)."""
    _ndim("sum_cols", x, 2)
    return _emit("sum_cols", x.data.sum(axis=1), (x,))


@_register("sum_cols")
def _sum_cols_bw(g, rec):
    return (np.repeat(g[:, None], rec.inputs[0].shape[1], axis=1),)


def mean_rows(x: Tensor) -> Tensor:
    """Column means over the rows, shape (1, n)."""
    _ndim("mean_rows", x, 2)
    return _emit("mean_rows", x.data.mean(axis=0, keepdims=True), (x,))


@_register("mean_rows")
def _mean_rows_bw(g, rec):
    m = rec.inputs[0].shape[0]
    return (np.repeat(g / m, m, axis=0),)


def max_rows(x: Tensor) -> Tensor:
    """Column maxima over the rows, shape (1, n); ties route gradient to the first row."""
    _ndim("max_rows", x, 2)
    arg = x.data.argmax(axis=0)
    return _emit("max_rows", x.data.max(axis=0, keepdims=True), (x,), arg=arg)


@_register("max_rows")
def _max_rows_bw(g, rec):
    out = np.zeros_like(rec.inputs[0].data)
    cols = np.arange(out.shape[1])
    out[rec.saved["arg"], cols] = g[0]
    return (out,)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Softmax cross-entropy of one logit vector against a class index."""
    z = logits.data.reshape(-1)
    if not 0 <= target < z.size:
        raise DimensionError(f"cross_entropy: target {target} outside [0, {z.size})")
    shifted = z - z.max()
    logsum = np.log(np.exp(shifted).sum())
    loss = logsum - shifted[target]
    return _emit("cross_entropy", np.asarray(loss, dtype=logits.dtype).reshape(()), (logits,), target=target)


@_register("cross_entropy")
def _cross_entropy_bw(g, rec):
    z = rec.inputs[0].data
    flat = z.reshape(-1)
    p = np.exp(flat - flat.max())
    p /= p.sum()
    p[rec.saved["target"]] -= 1
    return ((g * p).reshape(z.shape).astype(z.dtype, copy=False),)


def binary_cross_entropy(probs: Tensor, targets) -> Tensor:
    """Mean BCE of probabilities against {0,1} targets; probabilities are clamped to [1e-7, 1-1e-7]."""
    t = np.asarray(targets, dtype=probs.dtype)
    if t.shape != probs.shape:
        raise DimensionError(f"binary_cross_entropy: targets {t.shape} vs probs {probs.shape}")
    p = np.clip(probs.data, BCE_CLAMP, 1 - BCE_CLAMP)
    loss = -(t * np.log(p) + (1 - t) * np.log1p(-p)).mean()
    return _emit("bce", np.asarray(loss, dtype=probs.dtype).reshape(()), (probs,), targets=t, clipped=p)


@_register("bce")
def _bce_bw(g, rec):
    raw = rec.inputs[0].data
    p, t = rec.saved["clipped"], rec.saved["targets"]
    d = (p - t) / (p * (1 - p)) / p.size
    # No gradient flows through the clamp.
    d = np.where((raw < BCE_CLAMP) | (raw > 1 - BCE_CLAMP), 0.0, d)
    return ((g * d).astype(raw.dtype, copy=False),)
