"""Dense array arithmetic with reverse-mode automatic differentiation.

A thread-local tape records primitive operations in execution order; backward
walks the record once in reverse. Arrays are immutable after creation by
convention. With no tape active, operations run forward-only (inference).

Broadcasting is restricted to bias-add (trailing-dimension vector); everything
else requires explicit reshapes so that every gradient rule stays auditable.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _tape_stack() -> list["Tape"]:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Array:
    """A dense real array plus an optional gradient buffer.

    Gradients accumulate across backward passes until zero_grad, which is what
    gradient accumulation in the trainer relies on.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Array(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Array") -> "Array":
        return add(self, other)

    def __sub__(self, other: "Array") -> "Array":
        return sub(self, other)

    def __mul__(self, other: "Array") -> "Array":
        return mul(self, other)

    def __matmul__(self, other: "Array") -> "Array":
        return matmul(self, other)

    def __neg__(self) -> "Array":
        return scale(self, -1.0)


class Tape:
    """Ordered record of primitive ops; context manager activates it."""

    def __init__(self) -> None:
        self._ops: list[tuple[Array, tuple[Array, ...], Callable[[np.ndarray], Sequence[np.ndarray | None]]]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def record(self, out: Array, inputs: tuple[Array, ...], backward_fn) -> None:
        self._ops.append((out, inputs, backward_fn))

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, loss: Array) -> None:
        """Populate .grad of every requires-grad array reachable from loss.

        loss must be a scalar produced while this tape was active. The tape is
        cleared afterwards.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.accumulate_grad(np.ones_like(loss.data))
        for out, inputs, backward_fn in reversed(self._ops):
            if out.grad is None:
                continue  # never contributed to the loss
            grads = backward_fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is not None and inp.requires_grad:
                    inp.accumulate_grad(g)
        self._ops.clear()


def _record(out: Array, inputs: tuple[Array, ...], backward_fn) -> Array:
    tape = active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def constant(data, dtype=None) -> Array:
    return Array(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Array:
    return Array(data, requires_grad=True, dtype=dtype)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Array, b: Array) -> Array:
    """2-D by 2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Array(a.data @ b.data)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), backward)


def bmm(a: Array, b: Array) -> Array:
    """Batched matmul: (B, n, m) @ (B, m, p) -> (B, n, p)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"bmm shape mismatch: {a.shape} @ {b.shape}")
    out = Array(np.matmul(a.data, b.data))

    def backward(g):
        return np.matmul(g, b.data.transpose(0, 2, 1)), np.matmul(a.data.transpose(0, 2, 1), g)

    return _record(out, (a, b), backward)


def add(a: Array, b: Array) -> Array:
    """Elementwise add; b may be a 1-D bias matching a's trailing dim."""
    bias = b.ndim == 1 and a.ndim > 1 and a.shape[-1] == b.shape[0]
    if not bias and a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    out = Array(a.data + b.data)

    def backward(g):
        gb = g.sum(axis=tuple(range(g.ndim - 1))) if bias else g
        return g, gb

    return _record(out, (a, b), backward)


def sub(a: Array, b: Array) -> Array:
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} - {b.shape}")
    out = Array(a.data - b.data)

    def backward(g):
        return g, -g

    return _record(out, (a, b), backward)


def mul(a: Array, b: Array) -> Array:
    """Elementwise product of same-shape arrays."""
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")
    out = Array(a.data * b.data)

    def backward(g):
        return g * b.data, g * a.data

    return _record(out, (a, b), backward)


def scale(a: Array, c: float) -> Array:
    """Multiply by a Python scalar constant."""
    out = Array(a.data * a.data.dtype.type(c))

    def backward(g):
        return (g * a.data.dtype.type(c),)

    return _record(out, (a,), backward)


def softmax(a: Array) -> Array:
    """Softmax over the last axis, computed with max-subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Array(s)

    def backward(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (a,), backward)


def log(a: Array) -> Array:
    out = Array(np.log(a.data))

    def backward(g):
        return (g / a.data,)

    return _record(out, (a,), backward)


def relu(a: Array) -> Array:
    out = Array(np.maximum(a.data, 0))

    def backward(g):
        return (g * (a.data > 0),)

    return _record(out, (a,), backward)


def clamp_min(a: Array, floor: float) -> Array:
    """max(a, floor); clamped entries get zero gradient."""
    out = Array(np.maximum(a.data, a.data.dtype.type(floor)))

    def backward(g):
        return (g * (a.data > floor),)

    return _record(out, (a,), backward)


def gather_rows(a: Array, ids: np.ndarray) -> Array:
    """Rows of a 2-D array by integer index (embedding lookup)."""
    if a.ndim != 2:
        raise ValueError(f"gather_rows needs a 2-D table, got {a.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    out = Array(a.data[ids])

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, ids, g)
        return (ga,)

    return _record(out, (a,), backward)


def take_per_row(a: Array, ids: np.ndarray) -> Array:
    """a[i, ids[i]] for each row i of a 2-D array."""
    if a.ndim != 2 or len(ids) != a.shape[0]:
        raise ValueError(f"take_per_row mismatch: {a.shape} with {len(ids)} indices")
    ids = np.asarray(ids, dtype=np.int64)
    rows = np.arange(a.shape[0])
    out = Array(a.data[rows, ids])

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, ids), g)
        return (ga,)

    return _record(out, (a,), backward)


def reshape(a: Array, shape: tuple[int, ...]) -> Array:
    out = Array(a.data.reshape(shape))

    def backward(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), backward)


def transpose(a: Array, axes: tuple[int, ...]) -> Array:
    inv = np.argsort(axes)
    out = Array(np.ascontiguousarray(a.data.transpose(axes)))

    def backward(g):
        return (g.transpose(inv),)

    return _record(out, (a,), backward)


def asum(a: Array) -> Array:
    """Sum of all elements, as a scalar."""
    out = Array(a.data.sum())

    def backward(g):
        return (np.full_like(a.data, g),)

    return _record(out, (a,), backward)


def layer_norm(a: Array, gain: Array, bias: Array, eps: float = 1e-5) -> Array:
    """Normalize over the last axis, then affine by gain and bias (1-D)."""
    if gain.shape != (a.shape[-1],) or bias.shape != (a.shape[-1],):
        raise ValueError(f"layer_norm affine mismatch: {a.shape} with {gain.shape}/{bias.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = ((a.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.data.dtype.type(eps))
    xhat = (a.data - mu) * inv
    out = Array(xhat * gain.data + bias.data)

    def backward(g):
        n = a.shape[-1]
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (a, gain, bias), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(f: Callable[[], Array], params: Sequence[Array], step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f() evaluates the scalar loss at the params' current values; it is called
    repeatedly with individual entries perturbed in place. Relative error per
    entry is |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.flat
        for i in range(p.data.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f().item()
            flat[i] = orig - step
            lo = f().item()
            flat[i] = orig
            numeric = (hi - lo) / (2 * step)
            ana = float(analytic.flat[i])
            err = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst
