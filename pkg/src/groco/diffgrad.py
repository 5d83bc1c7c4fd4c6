"""Reverse-mode differentiation on a flat tape of numpy-backed tensors.

The op set is deliberately small: just enough to push gradients through
cosine distances, the relaxed sorting network, and a small MLP. Every op
function here dispatches on its arguments: given plain numpy arrays (or
floats) it computes the forward value directly, given a `Tensor` it records
a node on the owning `Tape`. Algorithm code elsewhere in the package is
therefore written once and runs in both "plain" and "recorded" mode.

Gradients come from `backward(tape, loss)`, which replays the tape in
reverse, applying one vector-Jacobian product rule per node. The rules live
in the module-level `VJP_RULES` table so tests can install a corrupted rule
as a negative control.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "NumericError",
    "Tensor",
    "Tape",
    "GradientMap",
    "GradCheckReport",
    "OP_KINDS",
    "VJP_RULES",
    "record",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "arctan",
    "log",
    "exp",
    "dot",
    "l2norm",
    "clamp",
    "scale",
    "concat",
    "index_select",
    "stop_grad",
    "transpose",
]


class NumericError(ArithmeticError):
    """Raised when an operation hits an invalid numeric domain (division by
    zero, non-positive log input, zero-norm vector, non-finite evaluation)."""


OP_KINDS = frozenset(
    {
        "add",
        "sub",
        "mul",
        "div",
        "matmul",
        "arctan",
        "log",
        "exp",
        "sum",
        "dot",
        "l2norm",
        "clamp",
        "scale",
        "concat",
        "index_select",
        "stop_grad",
    }
)


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Immutable float64 value bound to a tape.

    `data` is row-major and write-protected after construction; reuse across
    threads is safe. Arithmetic operators record onto the owning tape.
    """

    __slots__ = ("data", "tape", "tid")

    # Keep numpy from consuming `ndarray <op> Tensor`; we want __r*__ to run.
    __array_ufunc__ = None

    def __init__(self, data: np.ndarray, tape: "Tape", tid: int):
        self.data = data
        self.tape = tape
        self.tid = tid

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(tid={self.tid}, shape={self.shape})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("op_kind", "inputs", "output", "attrs")

    def __init__(self, op_kind, inputs, output, attrs):
        self.op_kind = op_kind
        self.inputs = inputs
        self.output = output
        self.attrs = attrs


class Tape:
    """Append-only record of operations, consumed by a single backward pass.

    A tape is single-writer: record on it from one thread only. Independent
    tapes are fully isolated and may run concurrently.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._next_tid = 0
        self._backward_done = False

    def _new_tensor(self, data: np.ndarray) -> Tensor:
        arr = _as_array(data)
        arr.setflags(write=False)
        t = Tensor(arr, self, self._next_tid)
        self._next_tid += 1
        return t

    def variable(self, data) -> Tensor:
        """Create a tracked leaf; gradients accumulate against it."""
        return self._new_tensor(np.array(data, dtype=np.float64))

    def constant(self, data) -> Tensor:
        """Create an untracked leaf. Gradients flowing into it are discarded
        by callers; it exists so constants can participate in recorded ops."""
        return self._new_tensor(np.array(data, dtype=np.float64))

    def _append(self, op_kind: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, **attrs) -> Tensor:
        out = self._new_tensor(out_data)
        self.nodes.append(_Node(op_kind, inputs, out, attrs))
        return out


def _lift(tape: Tape, x) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("operands belong to different tapes")
        return x
    return tape.constant(x)


def _find_tape(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Tensor):
            return a.tape
        if isinstance(a, (list, tuple)):
            t = _find_tape(*a)
            if t is not None:
                return t
    return None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce an output gradient back to the shape of a broadcast input."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# op forwards


def add(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.add(_as_array(a), _as_array(b))
    tape = _find_tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return tape._append("add", (a, b), np.add(a.data, b.data))


def sub(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.subtract(_as_array(a), _as_array(b))
    tape = _find_tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return tape._append("sub", (a, b), np.subtract(a.data, b.data))


def mul(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.multiply(_as_array(a), _as_array(b))
    tape = _find_tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return tape._append("mul", (a, b), np.multiply(a.data, b.data))


def div(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = _as_array(b)
        if np.any(b == 0.0):
            raise NumericError("division by zero")
        return np.divide(_as_array(a), b)
    tape = _find_tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if np.any(b.data == 0.0):
        raise NumericError(f"division by zero at node {len(tape.nodes)}")
    return tape._append("div", (a, b), np.divide(a.data, b.data))


def _matmul_forward(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ValueError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def matmul(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return _matmul_forward(_as_array(a), _as_array(b))
    tape = _find_tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return tape._append("matmul", (a, b), _matmul_forward(a.data, b.data))


def arctan(x):
    if not isinstance(x, Tensor):
        return np.arctan(_as_array(x))
    return x.tape._append("arctan", (x,), np.arctan(x.data))


def log(x):
    if not isinstance(x, Tensor):
        x = _as_array(x)
        if np.any(x <= 0.0):
            raise NumericError("log of non-positive value")
        return np.log(x)
    if np.any(x.data <= 0.0):
        raise NumericError(f"log of non-positive value at node {len(x.tape.nodes)}")
    return x.tape._append("log", (x,), np.log(x.data))


def exp(x):
    if not isinstance(x, Tensor):
        return np.exp(_as_array(x))
    return x.tape._append("exp", (x,), np.exp(x.data))


def sum(x):  # noqa: A001 - mirrors the op name; full reduction to a scalar
    if not isinstance(x, Tensor):
        return np.sum(_as_array(x))
    return x.tape._append("sum", (x,), np.sum(x.data))


def dot(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        a, b = _as_array(a), _as_array(b)
        if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
            raise ValueError(f"dot expects equal-length vectors, got {a.shape}, {b.shape}")
        return np.dot(a, b)
    tape = _find_tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"dot expects equal-length vectors, got {a.shape}, {b.shape}")
    return tape._append("dot", (a, b), np.dot(a.data, b.data))


def _l2norm_forward(x: np.ndarray, axis, keepdims) -> np.ndarray:
    return np.sqrt(np.sum(np.square(x), axis=axis, keepdims=keepdims))


def l2norm(x, axis=None, keepdims=False):
    if not isinstance(x, Tensor):
        return _l2norm_forward(_as_array(x), axis, keepdims)
    out = _l2norm_forward(x.data, axis, keepdims)
    if np.any(out == 0.0):
        raise NumericError(f"l2norm of zero vector at node {len(x.tape.nodes)}")
    return x.tape._append("l2norm", (x,), out, axis=axis, keepdims=keepdims)


def clamp(x, lo=None, hi=None):
    if lo is None and hi is None:
        raise ValueError("clamp requires at least one bound")
    if not isinstance(x, Tensor):
        return np.clip(_as_array(x), lo, hi)
    return x.tape._append("clamp", (x,), np.clip(x.data, lo, hi), lo=lo, hi=hi)


def scale(x, factor):
    factor = float(factor)
    if not isinstance(x, Tensor):
        return _as_array(x) * factor
    return x.tape._append("scale", (x,), x.data * factor, factor=factor)


def concat(parts):
    """Concatenate flattened parts into one 1-D array."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat of zero parts")
    tape = _find_tape(*parts)
    if tape is None:
        return np.concatenate([np.ravel(_as_array(p)) for p in parts])
    parts = [_lift(tape, p) for p in parts]
    out = np.concatenate([p.data.ravel() for p in parts])
    return tape._append("concat", tuple(parts), out)


def index_select(x, indices, assume_unique=False):
    """Gather by flat index; the output takes the shape of `indices`.

    Covers row selection, reordering, transposition and tiling. Gradients
    scatter-add back through the index map.
    """
    indices = np.asarray(indices, dtype=np.intp)
    if not isinstance(x, Tensor):
        x = _as_array(x)
        if indices.size and (indices.min() < 0 or indices.max() >= x.size):
            raise ValueError("index_select index out of range")
        return np.take(x.ravel(), indices)
    if indices.size and (indices.min() < 0 or indices.max() >= x.size):
        raise ValueError("index_select index out of range")
    out = np.take(x.data.ravel(), indices)
    return x.tape._append("index_select", (x,), out, indices=indices, assume_unique=assume_unique)


def stop_grad(x):
    """Identity forward, zero gradient toward the input."""
    if not isinstance(x, Tensor):
        return _as_array(x)
    return x.tape._append("stop_grad", (x,), x.data)


_TRANSPOSE_IDX: dict[tuple[int, int], np.ndarray] = {}


def transpose(x):
    """2-D transpose, expressed as a permutation gather in recorded mode."""
    if not isinstance(x, Tensor):
        x = _as_array(x)
        if x.ndim != 2:
            raise ValueError("transpose expects a 2-D operand")
        return x.T.copy()
    if x.ndim != 2:
        raise ValueError("transpose expects a 2-D operand")
    m, n = x.shape
    key = (m, n)
    idx = _TRANSPOSE_IDX.get(key)
    if idx is None:
        idx = np.arange(m * n, dtype=np.intp).reshape(m, n).T.copy()
        _TRANSPOSE_IDX[key] = idx
    return index_select(x, idx, assume_unique=True)


_OP_FUNCS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "arctan": arctan,
    "log": log,
    "exp": exp,
    "sum": sum,
    "dot": dot,
    "l2norm": l2norm,
    "clamp": clamp,
    "scale": scale,
    "concat": concat,
    "index_select": index_select,
    "stop_grad": stop_grad,
}


def record(op_kind: str, *inputs, **attrs):
    """Record one named operation. `inputs` must contain at least one Tensor
    (plain values are lifted to constants on that Tensor's tape)."""
    if op_kind not in OP_KINDS:
        raise ValueError(f"unknown op_kind {op_kind!r}")
    fn = _OP_FUNCS[op_kind]
    if op_kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# vector-Jacobian product rules


def _vjp_add(node, g):
    a, b = node.inputs
    return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _vjp_sub(node, g):
    a, b = node.inputs
    return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _vjp_mul(node, g):
    a, b = node.inputs
    return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))


def _vjp_div(node, g):
    a, b = node.inputs
    ga = _unbroadcast(g / b.data, a.shape)
    gb = _unbroadcast(-g * a.data / np.square(b.data), b.shape)
    return (ga, gb)


def _vjp_matmul(node, g):
    a, b = node.inputs
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        return (g @ bd.T, ad.T @ g)
    if ad.ndim == 2 and bd.ndim == 1:
        return (np.outer(g, bd), ad.T @ g)
    # 1-D @ 2-D
    return (bd @ g, np.outer(ad, g))


def _vjp_arctan(node, g):
    x = node.inputs[0].data
    return (g / (1.0 + np.square(x)),)


def _vjp_log(node, g):
    return (g / node.inputs[0].data,)


def _vjp_exp(node, g):
    return (g * node.output.data,)


def _vjp_sum(node, g):
    return (np.full(node.inputs[0].shape, float(g)),)


def _vjp_dot(node, g):
    a, b = node.inputs
    return (g * b.data, g * a.data)


def _vjp_l2norm(node, g):
    x = node.inputs[0].data
    out = node.output.data
    axis = node.attrs["axis"]
    if axis is not None and not node.attrs["keepdims"]:
        g = np.expand_dims(g, axis)
        out = np.expand_dims(out, axis)
    return (g * (x / out),)


def _vjp_clamp(node, g):
    x = node.inputs[0].data
    lo, hi = node.attrs["lo"], node.attrs["hi"]
    mask = np.ones_like(x, dtype=bool)
    if lo is not None:
        mask &= x > lo
    if hi is not None:
        mask &= x < hi
    return (g * mask,)


def _vjp_scale(node, g):
    return (g * node.attrs["factor"],)


def _vjp_concat(node, g):
    outs = []
    offset = 0
    for p in node.inputs:
        outs.append(g[offset : offset + p.size].reshape(p.shape))
        offset += p.size
    return tuple(outs)


def _vjp_index_select(node, g):
    x = node.inputs[0]
    idx = node.attrs["indices"]
    gx = np.zeros(x.size, dtype=np.float64)
    if node.attrs["assume_unique"]:
        gx[idx.ravel()] = g.ravel()
    else:
        np.add.at(gx, idx.ravel(), g.ravel())
    return (gx.reshape(x.shape),)


def _vjp_stop_grad(node, g):
    return (None,)


VJP_RULES = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "matmul": _vjp_matmul,
    "arctan": _vjp_arctan,
    "log": _vjp_log,
    "exp": _vjp_exp,
    "sum": _vjp_sum,
    "dot": _vjp_dot,
    "l2norm": _vjp_l2norm,
    "clamp": _vjp_clamp,
    "scale": _vjp_scale,
    "concat": _vjp_concat,
    "index_select": _vjp_index_select,
    "stop_grad": _vjp_stop_grad,
}


class GradientMap:
    """Accumulated gradients keyed by tensor identity. Tensors the loss never
    touched report a zero gradient of matching shape."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def grad(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(t.tid)
        if g is None:
            return np.zeros(t.shape, dtype=np.float64)
        return g


def backward(tape: Tape, loss: Tensor) -> GradientMap:
    """Reverse pass over the tape seeding d(loss)/d(loss) = 1.

    Accumulation follows node order, so results are deterministic and
    bitwise reproducible for an identical tape. One backward per recording.
    """
    if not isinstance(loss, Tensor) or loss.tape is not tape:
        raise ValueError("loss is not a tensor on this tape")
    if loss.ndim != 0:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if tape._backward_done:
        raise ValueError("tape already consumed by a backward pass")
    tape._backward_done = True

    grads: dict[int, np.ndarray] = {loss.tid: np.ones((), dtype=np.float64)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output.tid)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, VJP_RULES[node.op_kind](node, g)):
            if gi is None:
                continue
            acc = grads.get(inp.tid)
            grads[inp.tid] = gi if acc is None else acc + gi
    return GradientMap(grads)


@dataclass(frozen=True)
class GradCheckReport:
    """Per-coordinate comparison of analytic and central-difference gradients."""

    passed: bool
    max_rel_error: float
    worst_index: int
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray


def _eval_scalar(fn, point: np.ndarray) -> float:
    tape = Tape()
    x = tape.variable(point)
    out = fn(tape, x)
    val = float(out.data) if isinstance(out, Tensor) else float(out)
    if not math.isfinite(val):
        raise NumericError(f"non-finite evaluation at {point!r}")
    return val


def grad_check(fn, point, h: float = 1e-6, tol: float = 1e-5) -> GradCheckReport:
    """Compare the taped gradient of `fn` against central differences.

    `fn(tape, x)` must build and return a scalar on the given tape. A
    coordinate passes when its relative error is below `tol`; coordinates
    where both gradients are below 1e-10 in magnitude are compared
    absolutely instead.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    point = np.asarray(point, dtype=np.float64)
    tape = Tape()
    x = tape.variable(point)
    out = fn(tape, x)
    if not isinstance(out, Tensor) or out.ndim != 0:
        raise ValueError("fn must return a scalar tensor")
    if not math.isfinite(float(out.data)):
        raise NumericError(f"non-finite evaluation at {point!r}")
    analytic = backward(tape, out).grad(x)

    flat = point.ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        shifted = flat.copy()
        shifted[i] = flat[i] + h
        f_plus = _eval_scalar(fn, shifted.reshape(point.shape))
        shifted[i] = flat[i] - h
        f_minus = _eval_scalar(fn, shifted.reshape(point.shape))
        numeric[i] = (f_plus - f_minus) / (2.0 * h)
    numeric = numeric.reshape(point.shape)

    a, n = analytic.ravel(), numeric.ravel()
    rel = np.zeros_like(a)
    for i in range(a.size):
        diff = abs(a[i] - n[i])
        if abs(a[i]) < 1e-10 and abs(n[i]) < 1e-10:
            rel[i] = diff
        else:
            rel[i] = diff / max(abs(a[i]), abs(n[i]))
    worst = int(np.argmax(rel)) if rel.size else 0
    max_rel = float(rel[worst]) if rel.size else 0.0
    return GradCheckReport(
        passed=bool(max_rel < tol),
        max_rel_error=max_rel,
        worst_index=worst,
        analytic=analytic,
        numeric=numeric,
        rel_errors=rel.reshape(point.shape),
    )
