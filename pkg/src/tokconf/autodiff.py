"""Reverse-mode differentiation over dense float64 arrays.

Every trainable model in this package is expressed through the primitives
defined here. A ``Tape`` records each primitive applied while it is active;
``Tape.gradients`` replays the records once, in reverse, accumulating
gradients. Tensors wrap float64 ndarrays and reject non-finite values at
construction, so numerical failures surface where they happen instead of
propagating as NaN.

With no tape active the primitives just compute, which is what inference
uses. Tapes are kept on a thread-local stack, so independent tapes may run
concurrently on separate threads; a single tape must stay on one thread.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "sqrt",
    "clamp_min",
    "concat",
    "narrow",
    "gather_rows",
    "softmax_rows",
    "tsum",
    "sum_axis",
    "mean_axis",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Operand shapes do not fit the primitive they were given to."""


class TapeError(RuntimeError):
    """gradients() was asked for something the tape cannot provide."""


_ACTIVE = threading.local()


def _stack() -> list:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = _ACTIVE.stack = []
    return stack


def _active_tape():
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with a grad-tracking flag.

    ``requires_grad=True`` marks a leaf parameter, or propagates through an
    operation whose inputs include one. Values must be finite.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise ValueError(
                "non-finite values rejected at tensor construction "
                f"(shape {arr.shape})"
            )
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def detach(self) -> "Tensor":
        """Same values, no grad tracking. Gradients queried for a detached
        tensor come back as zeros, by convention."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; python scalars become untracked constants.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitives; record order is a topological order.

    Use as a context manager around the forward computation, then call
    ``gradients(loss, params)``. A tape is meant for one forward pass,
    confined to the thread that opened it.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _stack().pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise TapeError("tape stack corrupted: exited a tape out of order")
        return False

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: Tensor, inputs: tuple, backward_fn: Callable) -> None:
        self._records.append((out, inputs, backward_fn))

    def gradients(self, loss: Tensor, params: Sequence[Tensor]) -> dict:
        """Map each parameter to d(loss)/d(param) as a float64 ndarray.

        Parameters that never touched this tape (or were detached) get a
        zero array of their shape. The loss must be a scalar produced by
        primitives recorded on this tape.
        """
        if loss.data.shape != ():
            raise TapeError(
                f"loss must be a scalar, got shape {loss.data.shape}"
            )
        produced = {id(rec[0]) for rec in self._records}
        if id(loss) not in produced:
            raise TapeError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        for out, inputs, backward_fn in reversed(self._records):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue
            for inp, g in zip(inputs, backward_fn(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                held = grads.get(key)
                grads[key] = g if held is None else held + g

        result = {}
        for p in params:
            g = grads.get(id(p))
            if g is None:
                result[p] = np.zeros_like(p.data)
            else:
                result[p] = np.ascontiguousarray(g, dtype=np.float64)
        return result


def _emit(data: np.ndarray, inputs: tuple, backward_fn: Callable, op: str) -> Tensor:
    track = any(t.requires_grad for t in inputs)
    try:
        out = Tensor(data, requires_grad=track)
    except ValueError as err:
        raise ValueError(f"{op}: {err}") from None
    if track:
        tape = _active_tape()
        if tape is not None:
            tape._record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape an operand had before broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _emit(ad * bd, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * ad / (bd * bd), b.shape),
        )

    return _emit(ad / bd, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        return (-g,)

    return _emit(-a.data, (a,), backward, "neg")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        return (g * s,)

    return _emit(a.data * s, (a,), backward, "scale")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} x {b.shape} do not compose")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _emit(ad @ bd, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d, got shape {a.shape}")

    def backward(g):
        return (g.T,)

    return _emit(a.data.T, (a,), backward, "transpose")


# ---------------------------------------------------------------------------
# Elementwise nonlinearities
# ---------------------------------------------------------------------------


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_values(a.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _emit(s, (a,), backward, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - t * t),)

    return _emit(t, (a,), backward, "tanh")


def relu(a: Tensor) -> Tensor:
    ad = a.data

    def backward(g):
        # Subgradient 0 at the kink.
        return (g * (ad > 0.0),)

    return _emit(np.maximum(ad, 0.0), (a,), backward, "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(a.data)

    def backward(g):
        return (g * e,)

    return _emit(e, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)

    def backward(g):
        return (g / ad,)

    return _emit(out, (a,), backward, "log")


def sqrt(a: Tensor) -> Tensor:
    r = np.sqrt(a.data)

    def backward(g):
        return (g / (2.0 * r),)

    return _emit(r, (a,), backward, "sqrt")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    ad = a.data
    floor = float(floor)

    def backward(g):
        return (g * (ad >= floor),)

    return _emit(np.maximum(ad, floor), (a,), backward, "clamp_min")


# ---------------------------------------------------------------------------
# Structure: concat / slice / gather
# ---------------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: needs at least one tensor")
    ndim = tensors[0].data.ndim
    for t in tensors:
        if t.data.ndim != ndim:
            raise ShapeError(
                f"concat: rank mismatch {[t.shape for t in tensors]}"
            )
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[t.shape for t in tensors]} on axis {axis}"
        ) from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(out, tuple(tensors), backward, "concat")


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if axis >= a.data.ndim or not (0 <= start < stop <= a.shape[axis]):
        raise ShapeError(
            f"narrow: range [{start}, {stop}) on axis {axis} of shape {a.shape}"
        )
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=np.float64)
        full[index] = g
        return (full,)

    return _emit(a.data[index], (a,), backward, "narrow")


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup: out[i] = table[ids[i]]. ids is a 1-d integer array."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"gather_rows: ids must be 1-d, got shape {ids.shape}")
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-d, got shape {table.shape}")
    n_rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        bad = int(np.argmax((ids < 0) | (ids >= n_rows)))
        raise ShapeError(
            f"gather_rows: id {ids[bad]} at position {bad} outside [0, {n_rows})"
        )
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, ids, g)
        return (full,)

    return _emit(table.data[ids], (table,), backward, "gather_rows")


# ---------------------------------------------------------------------------
# Softmax and reductions
# ---------------------------------------------------------------------------


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a 2-d tensor, computed with max subtraction."""
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows: expected 2-d, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return _emit(p, (a,), backward, "softmax_rows")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape

    def backward(g):
        return (np.full(shape, float(g), dtype=np.float64),)

    return _emit(np.asarray(a.data.sum()), (a,), backward, "sum")


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    if axis >= a.data.ndim:
        raise ShapeError(f"sum_axis: axis {axis} out of range for shape {a.shape}")
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum_axis")


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    if axis >= a.data.ndim:
        raise ShapeError(f"mean_axis: axis {axis} out of range for shape {a.shape}")
    shape = a.shape
    n = shape[axis]

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _emit(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward, "mean_axis")


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], theta: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the parameter tensor to a scalar Tensor and must reread
    ``theta.data`` on every call; the checker perturbs it in place, one
    coordinate at a time. Relative error per coordinate is
    |analytic - central| / max(1e-12, |analytic| + |central|).

    Not meaningful at nondifferentiable points: f(x) = |x| probed at x = 0
    reports an error near 1 because the central difference straddles the
    kink.
    """
    if h <= 0:
        raise ValueError(f"finite_diff_check: h must be positive, got {h}")
    if not theta.requires_grad:
        raise ValueError("finite_diff_check: theta does not require grad")

    with Tape() as tape:
        out = f(theta)
    if out.data.shape != ():
        raise TapeError(f"finite_diff_check: f returned shape {out.data.shape}, not a scalar")
    analytic = tape.gradients(out, [theta])[theta].reshape(-1)

    flat = theta.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        up = float(f(theta).data)
        flat[i] = saved - h
        down = float(f(theta).data)
        flat[i] = saved
        if not (np.isfinite(up) and np.isfinite(down)):
            raise ValueError(
                f"finite_diff_check: non-finite value at probe of coordinate {i}"
            )
        central = (up - down) / (2.0 * h)
        err = abs(analytic[i] - central) / max(1e-12, abs(analytic[i]) + abs(central))
        worst = max(worst, err)
    return worst
