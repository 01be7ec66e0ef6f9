"""Dense float arithmetic with hand-written gradients and an Adam optimizer.

Matrices are plain 2-D numpy arrays. The working precision is float32 unless
``TSINTERP_FLOAT64=1`` is set in the environment, or code runs inside the
:func:`precision` context manager (used by the gradient-check tests).
"""

from __future__ import annotations

import contextlib
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

_DTYPE = np.float64 if os.environ.get("TSINTERP_FLOAT64") == "1" else np.float32


class DimensionError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Raised when training produces a non-finite loss or gradient."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


def get_dtype() -> type:
    return _DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


def asmatrix(values, dtype=None) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype or _DTYPE)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def _check_finite(m: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise FloatingPointError(f"{what} produced non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = asmatrix(a)
    b = asmatrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return _check_finite(a @ b, "matmul")


def softmax_rows(m) -> np.ndarray:
    m = np.asarray(m)
    e = m - m.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    out = dp * p
    s = out.sum(axis=-1, keepdims=True)
    np.subtract(dp, s, out=out)
    out *= p
    return out


def log_softmax(m: np.ndarray) -> np.ndarray:
    shifted = m - m.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class Parameter:
    """A trainable tensor with its gradient and Adam moment buffers."""

    value: np.ndarray
    name: str = ""
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)
    step_count: int = 0

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0)


def rmsnorm(x, gain: Parameter | np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Scale each row to unit root-mean-square, then multiply by ``gain``."""
    g = gain.value if isinstance(gain, Parameter) else np.asarray(gain)
    x = np.asarray(x)
    if g.shape[-1] != x.shape[-1]:
        raise DimensionError(f"gain length {g.shape[-1]} != row length {x.shape[-1]}")
    y, _ = rmsnorm_forward(x, g, eps)
    return y


def rmsnorm_forward(x: np.ndarray, g: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return x * inv * g, inv


def rmsnorm_backward(
    dy: np.ndarray, x: np.ndarray, g: np.ndarray, inv: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    dg = (dy * x * inv).reshape(-1, x.shape[-1]).sum(axis=0)
    dxh = dy * g
    dx = inv * dxh - x * inv**3 * (dxh * x).mean(axis=-1, keepdims=True)
    return dx, dg


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray, return_tanh: bool = False):
    """Tanh approximation of GELU."""
    t = x * x
    t *= 0.044715
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    y = t + 1.0
    y *= x
    y *= 0.5
    return (y, t) if return_tanh else y


def gelu_backward(dy: np.ndarray, x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    if t is None:
        _, t = gelu(x, return_tanh=True)
    # d/dx = 0.5(1+t) + 0.5 x (1-t^2) c (1 + 3a x^2)
    dinner = x * x
    dinner *= 3 * 0.044715 * _GELU_C
    dinner += _GELU_C
    dinner *= x
    sech2 = t * t
    np.subtract(1.0, sech2, out=sech2)
    dinner *= sech2
    dinner += t
    dinner += 1.0
    dinner *= 0.5
    dinner *= dy
    return dinner


def adam_step(
    p: Parameter,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Parameter:
    """Bias-corrected Adam update in place, then zero the gradient."""
    g = p.grad
    if not np.all(np.isfinite(g)):
        raise DivergenceError(f"non-finite gradient in parameter {p.name or '<unnamed>'}")
    p.step_count += 1
    t = p.step_count
    p.adam_m *= beta1
    p.adam_m += (1 - beta1) * g
    p.adam_v *= beta2
    p.adam_v += (1 - beta2) * g * g
    m_hat = p.adam_m / (1 - beta1**t)
    v_hat = p.adam_v / (1 - beta2**t)
    p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)
    p.zero_grad()
    return p


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup followed by cosine decay to ``floor * base_lr``."""

    base_lr: float
    total_steps: int
    warmup_steps: int = 0
    floor: float = 0.01

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps exceeds total_steps")

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.base_lr * (step + 1) / self.warmup_steps
        span = max(self.total_steps - self.warmup_steps, 1)
        progress = min((step - self.warmup_steps) / span, 1.0)
        low = self.base_lr * self.floor
        return low + (self.base_lr - low) * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


def finite_diff_check(
    f: Callable[[], tuple[float, np.ndarray] | float],
    p: Parameter,
    h: float = 1e-3,
    indices: list[tuple[int, ...]] | None = None,
    analytic: np.ndarray | None = None,
    order: int = 2,
) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``f`` evaluates the scalar objective at the current ``p.value``. If
    ``analytic`` is not given, ``f`` must return ``(loss, grad)`` and the
    gradient from the unperturbed call is used. ``indices`` restricts the
    comparison to a subset of entries (all entries by default). ``order=4``
    uses the five-point central stencil, whose smaller truncation error
    allows a larger ``h`` in 32-bit arithmetic.
    """
    if analytic is None:
        _, analytic = f()
    analytic = np.asarray(analytic, dtype=np.float64)

    def scalar() -> float:
        out = f()
        return float(out[0] if isinstance(out, tuple) else out)

    if indices is None:
        indices = [tuple(ix) for ix in np.ndindex(*p.value.shape)]
    worst = 0.0
    for ix in indices:
        original = p.value[ix].copy()

        def at(offset):
            p.value[ix] = original + offset
            return scalar()

        if order == 4:
            numeric = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h)
        else:
            numeric = (at(h) - at(-h)) / (2 * h)
        p.value[ix] = original
        a = float(analytic[ix])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, err)
    return worst
