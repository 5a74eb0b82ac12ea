"""Minimal tape-based reverse-mode automatic differentiation over float64 arrays.

Usage::

    with Tape() as tape:
        loss = mean(mul(x, x))
    grads = tape.backward(loss)

Operations executed while a tape is active are recorded in order; ``backward``
walks the recording in reverse.  Outside a tape the same functions simply
compute values, which is what evaluation code relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-12


class AutodiffError(ValueError):
    """Raised for invalid shapes, non-finite values or tape misuse."""

    def __init__(self, op: str, message: str):
        self.op = op
        super().__init__(f"{op}: {message}")


class Tensor:
    """A dense float64 array with an accumulated gradient."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        if self.value.size != 1:
            raise AutodiffError("item", f"tensor of shape {self.shape} is not a scalar")
        return float(self.value.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.value.copy())

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    # arithmetic sugar; every operator goes through a recorded primitive
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class TapeEntry:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    entries: list[TapeEntry] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, entry: TapeEntry) -> None:
        if self.consumed:
            raise AutodiffError(entry.kind, "cannot record on a consumed tape")
        self.entries.append(entry)

    def tensors(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for e in self.entries:
            for t in (*e.inputs, e.output):
                seen.setdefault(id(t), t)
        return list(seen.values())

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Fill ``grad`` of every tensor on the tape with d(loss)/d(tensor).

        Returns a map from tensor to its gradient array.  A tape supports one
        backward pass.
        """
        if self.consumed:
            raise AutodiffError("backward", "tape already consumed")
        if loss.value.size != 1:
            raise AutodiffError("backward", f"loss must be scalar, got shape {loss.shape}")
        if not any(e.output is loss for e in self.entries):
            raise AutodiffError("backward", "loss was not produced on this tape")
        self.consumed = True
        tensors = self.tensors()
        for t in tensors:
            t.grad = np.zeros_like(t.value)
        loss.grad = np.ones_like(loss.value)
        for e in reversed(self.entries):
            if not e.output.grad.any():
                continue
            for t, g in zip(e.inputs, e.backward(e.output.grad)):
                if g is not None:
                    t.grad = t.grad + g
        return {t: t.grad for t in tensors}


_ACTIVE: list[Tape] = []


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _emit(kind: str, inputs: tuple[Tensor, ...], value: np.ndarray, backward) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise AutodiffError(kind, "non-finite output")
    out = Tensor(value)
    tape = active_tape()
    if tape is not None:
        tape.record(TapeEntry(kind, inputs, out, backward))
    return out


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise AutodiffError(kind, f"incompatible shapes {a.shape} and {b.shape}") from None


# -- primitives --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise AutodiffError("matmul", f"cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    with np.errstate(over="ignore", invalid="ignore"):  # _emit reports non-finite output
        out = av @ bv
    return _emit("matmul", (a, b), out, lambda g: (g @ bv.T, av.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.value + b.value, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return _emit(
        "mul", (a, b), av * bv, lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.value, lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), c * a.value, lambda g: (c * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _emit("relu", (a,), np.where(mask, a.value, 0.0), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return _emit("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by _emit
        y = np.exp(a.value)
    return _emit("exp", (a,), y, lambda g: (g * y,))


def log(a: Tensor, floor: float | None = None) -> Tensor:
    """Natural log.  With ``floor`` the input is clamped below first and the
    clamped cells pass no gradient; without it the input must be positive."""
    v = a.value
    if floor is None:
        if np.any(v <= 0):
            raise AutodiffError("log", "input must be strictly positive")
        return _emit("log", (a,), np.log(v), lambda g: (g / v,))
    clamped = v < floor
    safe = np.where(clamped, floor, v)
    return _emit("log", (a,), np.log(safe), lambda g: (np.where(clamped, 0.0, g / safe),))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the primitive's name
    shape = a.shape
    return _emit("sum", (a,), np.array(a.value.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _emit("mean", (a,), np.array(a.value.mean()), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def _check_rows(kind: str, a: Tensor) -> None:
    if a.value.ndim != 2:
        raise AutodiffError(kind, f"expected a 2-D tensor, got shape {a.shape}")


def softmax_rows(a: Tensor) -> Tensor:
    _check_rows("softmax_rows", a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _emit("softmax_rows", (a,), p, backward)


def log_softmax_rows(a: Tensor) -> Tensor:
    """Fused ``logit - logsumexp(logits)``; stays accurate for tiny probabilities."""
    _check_rows("log_softmax_rows", a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _emit("log_softmax_rows", (a,), out, backward)


def gather_rows(a: Tensor, index) -> Tensor:
    """Select rows of ``a`` by integer index (repeats allowed)."""
    _check_rows("gather_rows", a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1 or (idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0])):
        raise AutodiffError("gather_rows", f"row index out of range for shape {a.shape}")
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("gather_rows", (a,), a.value[idx], backward)


def gradient_reversal(x: Tensor, scale: float = 1.0) -> Tensor:
    """Identity on the forward pass; multiplies the incoming gradient by -scale."""
    if scale < 0:
        raise AutodiffError("gradient_reversal", "scale must be non-negative")
    c = -float(scale)
    return _emit("gradient_reversal", (x,), x.value.copy(), lambda g: (c * g,))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "neg": neg,
    "sum": sum,
    "mean": mean,
    "softmax_rows": softmax_rows,
    "log_softmax_rows": log_softmax_rows,
    "gather_rows": gather_rows,
    "scale": scale,
    "gradient_reversal": gradient_reversal,
}


def apply_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise AutodiffError(kind, "unknown primitive") from None
    return fn(*inputs, **kwargs)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    tape = active_tape()
    if tape is None:
        raise AutodiffError("backward", "no active tape")
    return tape.backward(loss)


# -- numerical gradient check -----------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_coordinate: tuple[int, int]  # (argument index, flat coordinate)
    eps: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def grad_check(f: Callable[[list[Tensor]], Tensor], point: Sequence, eps: float = 1e-5) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f`` with central differences.

    ``f`` receives a list of tensors built from ``point`` and must return a
    scalar tensor.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    arrays = [np.array(p, dtype=np.float64) for p in point]
    tensors = [Tensor(a) for a in arrays]
    with Tape() as tape:
        out = f(tensors)
    grads = tape.backward(out)
    analytic = [grads.get(t, np.zeros_like(t.value)) for t in tensors]

    def value_at(arrs):
        v = f([Tensor(a) for a in arrs]).item()
        if not math.isfinite(v):
            raise AutodiffError("grad_check", "non-finite function value")
        return v

    worst, where = 0.0, (0, 0)
    for k, base in enumerate(arrays):
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = value_at(arrays)
            flat[i] = orig - eps
            fm = value_at(arrays)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = float(relative_error(np.array(analytic[k].reshape(-1)[i]), np.array(numeric)))
            if err > worst:
                worst, where = err, (k, i)
    return GradCheckReport(worst, where, eps)
