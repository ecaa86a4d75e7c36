"""
DREAGR - Numerical Core

Dense float64 building blocks shared by the preference model and the
aggregators. Gradients are closed-form per layer and composed by the callers
in reverse order; there is no tape.

This module implements:
- affine maps, ReLU, sigmoid, softmax / log-softmax
- segment softmax and segment sums for variable-size attention sets
- Parameter containers with Adam moments and seeded Glorot initialization
- Adam updates with coupled L2 weight decay
- Central finite-difference gradient verification
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from errors import NonFiniteGradientError, ShapeError

Tensor = np.ndarray

logger = logging.getLogger("NumericalCore")


@dataclass
class Parameter:
    """Learned tensor with its gradient and Adam moments"""
    name: str
    value: Tensor
    decay: bool = True
    grad: Tensor = field(default=None)
    adam_m: Tensor = field(default=None)
    adam_v: Tensor = field(default=None)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)


@dataclass
class AdamConfig:
    """Adam hyperparameters; weight_decay is the L2 coefficient lambda"""
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")


def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, ...]) -> Tensor:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)); vectors use fan_in = fan_out = len"""
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        fan_out, fan_in = shape[0], int(np.prod(shape[1:]))
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def affine(W: Tensor, x: Tensor, b: Tensor) -> Tensor:
    """Wx + b for a single vector x[in] or a batch x[batch, in]"""
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ShapeError("affine", W.shape, x.shape, b.shape)
    return x @ W.T + b


def affine_backward(W: Tensor, x: Tensor, d_out: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """Gradients (dW, dx, db) of a batched affine map"""
    x2 = np.atleast_2d(x)
    d2 = np.atleast_2d(d_out)
    return d2.T @ x2, (d_out @ W), d2.sum(axis=0)


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(pre: Tensor, d_out: Tensor) -> Tensor:
    return d_out * (pre > 0.0)


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`"""
    shifted = v - np.max(v, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)


def log_softmax(v: Tensor, axis: int = -1) -> Tensor:
    shifted = v - np.max(v, axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def segment_sum(values: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of `values` into `n_segments` buckets (deterministic order)"""
    out = np.zeros((n_segments,) + values.shape[1:], dtype=np.float64)
    np.add.at(out, segments, values)
    return out


def segment_softmax(scores: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Softmax of `scores` within each segment id"""
    if scores.size == 0:
        return scores.astype(np.float64)
    peak = np.full(n_segments, -np.inf)
    np.maximum.at(peak, segments, scores)
    ex = np.exp(scores - peak[segments])
    totals = segment_sum(ex, segments, n_segments)
    return ex / totals[segments]


def segment_softmax_backward(weights: Tensor, d_weights: Tensor,
                             segments: np.ndarray, n_segments: int) -> Tensor:
    """d scores from d weights: w * (dw - sum_segment(w * dw))"""
    inner = segment_sum(weights * d_weights, segments, n_segments)
    return weights * (d_weights - inner[segments])


def adam_step(p: Parameter, cfg: AdamConfig, t: int) -> Parameter:
    """
    One bias-corrected Adam update in place.

    Weight decay is coupled L2 on weight tensors (p.decay) and is added to the
    gradient before the moments are updated.
    """
    if t < 1:
        raise ValueError(f"Adam step index starts at 1, got {t}")
    if not np.all(np.isfinite(p.grad)):
        raise NonFiniteGradientError(p.name)
    grad = p.grad
    if p.decay and cfg.weight_decay:
        grad = grad + cfg.weight_decay * p.value
    p.adam_m *= cfg.beta1
    p.adam_m += (1.0 - cfg.beta1) * grad
    p.adam_v *= cfg.beta2
    p.adam_v += (1.0 - cfg.beta2) * grad * grad
    m_hat = p.adam_m / (1.0 - cfg.beta1 ** t)
    v_hat = p.adam_v / (1.0 - cfg.beta2 ** t)
    p.value -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return p


@dataclass
class GradCheckReport:
    """Max relative error between analytic and central-difference gradients"""
    max_relative_error: Dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.max_relative_error.values())

    @property
    def worst(self) -> Tuple[str, float]:
        name = max(self.max_relative_error, key=self.max_relative_error.get)
        return name, self.max_relative_error[name]


def grad_check(loss_fn: Callable[[bool], float], params: Iterable[Parameter],
               h: float = 1e-5, tol: float = 1e-4, scale_floor: float = 1e-8,
               corrupt: Optional[Callable[[List[Parameter]], None]] = None) -> GradCheckReport:
    """
    Compare analytic gradients with (L(theta+h) - L(theta-h)) / 2h entrywise.

    `loss_fn(True)` must zero and fill every p.grad; `loss_fn(False)` only
    evaluates the loss. `corrupt` may tamper with the analytic gradients before
    the comparison (detector sanity checks). The relative error uses
    max(|analytic|, |numeric|, scale_floor) as denominator; losses built from
    many float64 terms may need a floor near the finite-difference noise.
    """
    params = list(params)
    loss_fn(True)
    analytic = {p.name: p.grad.copy() for p in params}
    if corrupt is not None:
        corrupt(params)
        analytic = {p.name: p.grad.copy() for p in params}

    errors: Dict[str, float] = {}
    for p in params:
        worst = 0.0
        flat = p.value.reshape(-1)
        grad = analytic[p.name].reshape(-1)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + h
            plus = loss_fn(False)
            flat[k] = original - h
            minus = loss_fn(False)
            flat[k] = original
            numeric = (plus - minus) / (2.0 * h)
            denom = max(abs(grad[k]), abs(numeric), scale_floor)
            worst = max(worst, abs(grad[k] - numeric) / denom)
        errors[p.name] = worst
    report = GradCheckReport(max_relative_error=errors, tolerance=tol)
    name, err = report.worst if errors else ("-", 0.0)
    logger.info(f"Gradient check over {len(params)} tensors: worst {name} rel. error {err:.3e}")
    return report


def target_cross_entropy(logits: Tensor, targets: Tensor, floor: float = 1e-12) -> Tuple[float, Tensor]:
    """
    Sum over rows of -(1/|y|) * sum_v y_v * log pi_v with pi = softmax(logits).

    `targets` is a dense binary [batch, m] array whose rows are non-empty; the
    log is floored at `floor` and floored entries contribute no gradient.
    Returns the loss and d loss / d logits.
    """
    if logits.shape != targets.shape:
        raise ShapeError("target_cross_entropy", logits.shape, targets.shape)
    log_pi = log_softmax(logits)
    log_floor = np.log(floor)
    live = log_pi > log_floor
    weights = targets / targets.sum(axis=1, keepdims=True)
    loss = -float(np.sum(weights * np.where(live, log_pi, log_floor)))
    d_log_pi = -weights * live
    pi = np.exp(log_pi)
    d_logits = d_log_pi - pi * d_log_pi.sum(axis=1, keepdims=True)
    return loss, d_logits
