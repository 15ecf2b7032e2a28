"""Dense numerics shared by every other module.

All values are 64-bit numpy arrays. Shapes are checked explicitly and
mismatches raise :class:`ShapeError`; nothing here broadcasts silently.
The finite-difference gradient in :func:`finite_diff_grad` is the oracle
against which every analytic gradient in the library is tested.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericError, ShapeError


def as_f64(x) -> np.ndarray:
    """Coerce to a float64 array without copying when already one."""
    return np.asarray(x, dtype=np.float64)


def check_finite(x: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite entries in {what}")
    return x


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    a, b = as_f64(a), as_f64(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax(scores) -> np.ndarray:
    """Normalized exponentials of a score vector, max-subtracted for stability.

    Output entries lie in (0, 1] and sum to 1 within 1e-12; adding a
    constant to every score leaves the result unchanged.
    """
    s = as_f64(scores)
    if s.ndim != 1 or s.size == 0:
        raise DomainError(f"softmax expects a nonempty vector, got shape {s.shape}")
    e = np.exp(s - s.max())
    return e / e.sum()


def softmax_last(scores: np.ndarray) -> np.ndarray:
    """Softmax along the trailing axis of a stacked score array."""
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def leaky_relu(x, slope: float = 0.2) -> np.ndarray:
    """Elementwise max(x, slope * x); `slope` must lie in [0, 1)."""
    if not 0.0 <= slope < 1.0:
        raise DomainError(f"leaky_relu slope must be in [0, 1), got {slope}")
    x = as_f64(x)
    return np.where(x > 0.0, x, slope * x)


def leaky_relu_grad(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    """Subgradient of leaky_relu, taking the `slope` branch at 0."""
    return np.where(x > 0.0, 1.0, slope)


def l2_normalize_rows(m, eps: float = 1e-12) -> np.ndarray:
    """Divide each row by max(||row||_2, eps); zero rows stay zero."""
    if eps <= 0.0:
        raise DomainError(f"eps must be positive, got {eps}")
    m = as_f64(m)
    if m.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects a matrix, got shape {m.shape}")
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.maximum(norms, eps)


def cosine_distance(a, b) -> float:
    """1 - cos(a, b), in [0, 2]. Either vector all-zero gives 1."""
    a, b = as_f64(a), as_f64(b)
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError(f"cosine_distance expects vectors, got {a.shape} and {b.shape}")
    if a.shape != b.shape:
        raise ShapeError(f"cosine_distance dim mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise DomainError("cosine_distance needs at least one entry")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0
    d = 1.0 - float(a @ b) / (na * nb)
    return float(min(max(d, 0.0), 2.0))


@dataclass
class AdamState:
    """Per-parameter Adam moments with decoupled weight decay.

    `m` and `v` are allocated lazily to match the parameter on the first
    step; `t` counts completed steps.
    """

    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def copy(self) -> "AdamState":
        return AdamState(
            lr=self.lr,
            weight_decay=self.weight_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            m=None if self.m is None else self.m.copy(),
            v=None if self.v is None else self.v.copy(),
            t=self.t,
        )


@dataclass
class SgdState:
    """Momentum buffer for SGD, allocated lazily like AdamState."""

    lr: float = 1e-4
    momentum: float = 0.9
    velocity: np.ndarray | None = None

    def copy(self) -> "SgdState":
        return SgdState(
            lr=self.lr,
            momentum=self.momentum,
            velocity=None if self.velocity is None else self.velocity.copy(),
        )


def adam_step(param, grad, state: AdamState) -> np.ndarray:
    """One Adam update; weight decay is applied to the parameter directly.

    Mutates `state` (moments and step count) and returns the new parameter.
    """
    param, grad = as_f64(param), as_f64(grad)
    if param.shape != grad.shape:
        raise ShapeError(f"adam_step shape mismatch: {param.shape} vs {grad.shape}")
    if state.m is None:
        state.m = np.zeros_like(param)
        state.v = np.zeros_like(param)
    elif state.m.shape != param.shape:
        raise ShapeError(f"adam state shape {state.m.shape} vs param {param.shape}")
    state.t += 1
    out = param * (1.0 - state.lr * state.weight_decay)
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    out = out - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return check_finite(out, "adam_step output")


def sgd_momentum_step(param, grad, state: SgdState) -> np.ndarray:
    """One heavy-ball SGD update: v <- mu v + g, p <- p - lr v."""
    param, grad = as_f64(param), as_f64(grad)
    if param.shape != grad.shape:
        raise ShapeError(f"sgd_momentum_step shape mismatch: {param.shape} vs {grad.shape}")
    if state.velocity is None:
        state.velocity = np.zeros_like(param)
    elif state.velocity.shape != param.shape:
        raise ShapeError(f"sgd state shape {state.velocity.shape} vs param {param.shape}")
    state.velocity = state.momentum * state.velocity + grad
    out = param - state.lr * state.velocity
    return check_finite(out, "sgd_momentum_step output")


def dropout_mask(shape, rate: float, rng: np.random.Generator, training: bool = True) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability `rate`, else 1/(1-rate).

    In evaluation mode (`training=False`) the mask is all ones and the rng
    is not consumed, so train/eval runs stay independently reproducible.
    """
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return np.ones(shape, dtype=np.float64)
    keep = rng.random(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def finite_diff_grad(loss, at, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar-valued `loss` at `at`.

    Entry i is (loss(x + h e_i) - loss(x - h e_i)) / (2 h); this is the
    independent oracle used by the gradient-check tests and must never be
    routed through the analytic backward passes.
    """
    if h <= 0.0:
        raise DomainError(f"step h must be positive, got {h}")
    x = as_f64(at).copy()
    grad = np.zeros_like(x)
    flat_x = x.ravel()
    flat_g = grad.ravel()
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        up = float(loss(x))
        flat_x[i] = orig - h
        down = float(loss(x))
        flat_x[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"loss non-finite near entry {i}")
        flat_g[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative difference with a floor to absorb zero gradients."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)
