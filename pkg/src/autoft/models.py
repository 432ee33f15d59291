"""Toy inner learners and their optimizer.

Two learners live here: a linear prototype classifier (logits ``Mx + b``; the
prototype rows double as class embeddings for the contrastive loss) and a
diagonal-Gaussian density fitted with a KL-regularized, per-dimension-weighted
negative log-likelihood. Training uses AdamW with decoupled weight decay and a
cosine learning-rate schedule; the Gaussian fitter uses monotone gradient
descent with step halving.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .errors import DomainError, NumericalError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ParamLayout:
    """Named segments of a flat parameter vector; immutable after construction."""

    segments: Tuple[Tuple[str, Tuple[int, ...]], ...]

    @classmethod
    def linear(cls, n_classes: int, feature_dim: int) -> "ParamLayout":
        return cls((("proto", (n_classes, feature_dim)), ("bias", (n_classes,))))

    @property
    def size(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.segments)

    def slot(self, name: str) -> Tuple[int, Tuple[int, ...]]:
        """Return (offset, shape) of a segment."""
        offset = 0
        for seg_name, shape in self.segments:
            if seg_name == name:
                return offset, shape
            offset += int(np.prod(shape))
        raise DomainError(f"unknown segment {name!r}")


class ParamVector:
    """Flat float64 parameter vector with a named-segment layout."""

    def __init__(self, values, layout: ParamLayout):
        values = np.ascontiguousarray(values, dtype=np.float64).ravel()
        if values.size != layout.size:
            raise DomainError(f"vector of size {values.size} does not fit layout of size {layout.size}")
        self.values = values
        self.layout = layout

    def segment(self, name: str) -> np.ndarray:
        offset, shape = self.layout.slot(name)
        return self.values[offset : offset + int(np.prod(shape))].reshape(shape)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def to_json(self) -> str:
        return json.dumps(
            {
                "layout": [[name, list(shape)] for name, shape in self.layout.segments],
                "values": self.values.tolist(),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ParamVector":
        doc = json.loads(text)
        layout = ParamLayout(tuple((name, tuple(shape)) for name, shape in doc["layout"]))
        return cls(np.array(doc["values"], dtype=np.float64), layout)


class LinearForward:
    """Structure of the linear learner: logits, their transpose-Jacobian, prototypes."""

    def __init__(self, n_classes: int, feature_dim: int):
        self.n_classes = n_classes
        self.feature_dim = feature_dim
        self.n_params = n_classes * feature_dim + n_classes

    def _split(self, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        C, d = self.n_classes, self.feature_dim
        return values[: C * d].reshape(C, d), values[C * d :]

    def logits(self, values: np.ndarray, X: np.ndarray) -> np.ndarray:
        M, b = self._split(values)
        if X.shape[-1] != self.feature_dim:
            raise DomainError(f"feature dim {X.shape[-1]} != {self.feature_dim}")
        return X @ M.T + b

    def grad_from_logits(self, X: np.ndarray, dS: np.ndarray) -> np.ndarray:
        grad = np.empty(self.n_params)
        C, d = self.n_classes, self.feature_dim
        grad[: C * d] = (dS.T @ X).ravel()
        grad[C * d :] = dS.sum(axis=0)
        return grad

    def prototypes(self, values: np.ndarray) -> np.ndarray:
        return self._split(values)[0]

    def grad_from_prototypes(self, dM: np.ndarray) -> np.ndarray:
        grad = np.zeros(self.n_params)
        C, d = self.n_classes, self.feature_dim
        grad[: C * d] = dM.ravel()
        return grad


class LinearModel:
    """Prototype classifier with a frozen snapshot of its initial parameters."""

    def __init__(self, params: ParamVector, init: Optional[ParamVector] = None):
        segs = dict(params.layout.segments)
        if set(segs) != {"proto", "bias"}:
            raise DomainError("LinearModel expects segments {proto, bias}")
        self.num_classes, self.feature_dim = segs["proto"]
        self.params = params
        self.init = init if init is not None else params.copy()
        if self.init.layout != params.layout:
            raise DomainError("init and params must share a layout")
        self.forward = LinearForward(self.num_classes, self.feature_dim)

    @classmethod
    def from_arrays(cls, M, b, init_values: Optional[np.ndarray] = None) -> "LinearModel":
        M = np.asarray(M, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        layout = ParamLayout.linear(*M.shape)
        params = ParamVector(np.concatenate([M.ravel(), b]), layout)
        init = ParamVector(init_values, layout) if init_values is not None else None
        return cls(params, init)

    @property
    def proto(self) -> np.ndarray:
        return self.params.segment("proto")

    @property
    def bias(self) -> np.ndarray:
        return self.params.segment("bias")

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.forward.logits(self.params.values, np.atleast_2d(x))[0] if x.ndim == 1 else self.forward.logits(self.params.values, x)

    def clone(self) -> "LinearModel":
        return LinearModel(self.params.copy(), self.init)

    def with_values(self, values: np.ndarray) -> "LinearModel":
        return LinearModel(ParamVector(values, self.params.layout), self.init)

    def to_json(self) -> str:
        return json.dumps(
            {"params": json.loads(self.params.to_json()), "init": json.loads(self.init.to_json())},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "LinearModel":
        doc = json.loads(text)
        params = ParamVector.from_json(json.dumps(doc["params"]))
        init = ParamVector.from_json(json.dumps(doc["init"]))
        return cls(params, init)


def cosine_lr(t: int, total_steps: int, eta: float) -> float:
    """Cosine-annealed learning rate: eta at t=0, exactly 0 at t=total_steps."""
    if total_steps < 1:
        raise DomainError("total_steps must be >= 1")
    if not (0 <= t <= total_steps):
        raise DomainError(f"step {t} outside [0, {total_steps}]")
    return eta * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


@dataclass
class OptState:
    """AdamW state: step counter, moment vectors, and run-level hyperparameters."""

    t: int
    m: np.ndarray
    v: np.ndarray
    eta: float
    delta: float
    total_steps: int

    @classmethod
    def fresh(cls, n_params: int, eta: float, delta: float, total_steps: int) -> "OptState":
        return cls(0, np.zeros(n_params), np.zeros(n_params), eta, delta, total_steps)


def adamw_step(opt: OptState, params: ParamVector, grad: np.ndarray) -> Tuple[ParamVector, OptState]:
    """One decoupled-weight-decay Adam update under the cosine schedule.

    Pure: returns fresh parameter and state objects. The update order matches
    the fused kernels bit for bit:
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * delta * theta.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape:
        raise DomainError("gradient length does not match parameters")
    if not np.all(np.isfinite(grad)):
        raise NumericalError("adamw_step: non-finite gradient")
    if opt.t >= opt.total_steps:
        raise DomainError("optimizer exhausted: t == total_steps")
    lr = cosine_lr(opt.t, opt.total_steps, opt.eta)
    t1 = opt.t + 1
    m = ADAM_BETA1 * opt.m + (1.0 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * opt.v + (1.0 - ADAM_BETA2) * grad * grad
    m_hat = m / (1.0 - ADAM_BETA1**t1)
    v_hat = v / (1.0 - ADAM_BETA2**t1)
    theta = params.values
    new_values = theta - lr * (m_hat / (np.sqrt(v_hat) + ADAM_EPS)) - lr * opt.delta * theta
    new_params = ParamVector(new_values, params.layout)
    new_state = OptState(t1, m, v, opt.eta, opt.delta, opt.total_steps)
    return new_params, new_state


@dataclass
class DiagGaussian:
    """Diagonal Gaussian in mean / log-variance parameterization."""

    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        if self.mean.shape != self.log_var.shape or self.mean.ndim != 1 or self.mean.size < 1:
            raise DomainError("mean and log_var must be matching 1-D vectors")

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_var)

    @classmethod
    def standard(cls, dim: int) -> "DiagGaussian":
        return cls(np.zeros(dim), np.zeros(dim))

    def copy(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.copy(), self.log_var.copy())


def kl_diag_gaussians(q: DiagGaussian, p: DiagGaussian) -> float:
    """Closed-form KL(q || p) between diagonal Gaussians."""
    if q.dim != p.dim:
        raise DomainError("dimension mismatch")
    var_q = q.variance
    var_p = p.variance
    per_dim = 0.5 * (var_q / var_p + (q.mean - p.mean) ** 2 / var_p - 1.0 + (p.log_var - q.log_var))
    return float(per_dim.sum())


def gaussian_nll_per_dim(q: DiagGaussian, data: np.ndarray) -> np.ndarray:
    """Per-dimension mean negative log-likelihood of the rows of ``data`` under q."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != q.dim:
        raise DomainError(f"data shape {data.shape} does not match dimension {q.dim}")
    if data.shape[0] == 0:
        raise DomainError("empty data")
    resid = ((data - q.mean) ** 2).mean(axis=0)
    return 0.5 * (_LOG_2PI + q.log_var + resid * np.exp(-q.log_var))


def _vb_objective_and_grad(mean, log_var, prior: DiagGaussian, m1, m2, w):
    """Objective KL + sum_i w_i NLL_i and its gradient, from sufficient statistics."""
    var = np.exp(log_var)
    inv_var = np.exp(-log_var)
    prior_var = prior.variance
    dmu_p = mean - prior.mean
    kl = 0.5 * np.sum(var / prior_var + dmu_p**2 / prior_var - 1.0 + (prior.log_var - log_var))
    e_sq = m2 - 2.0 * mean * m1 + mean * mean  # E[(x - mu)^2] per dimension
    nll = 0.5 * (_LOG_2PI + log_var + e_sq * inv_var)
    obj = kl + float(np.dot(w, nll))
    g_mean = dmu_p / prior_var + w * (mean - m1) * inv_var
    g_lv = 0.5 * (var / prior_var - 1.0) + w * 0.5 * (1.0 - e_sq * inv_var)
    return obj, g_mean, g_lv


def vb_fit(
    prior: DiagGaussian,
    data: np.ndarray,
    dim_weights: np.ndarray,
    steps: int,
    lr: float,
    tol: float = 1e-8,
    callback: Optional[Callable[[int, DiagGaussian], None]] = None,
) -> DiagGaussian:
    """Fit a diagonal Gaussian by descending KL(q||prior) + sum_i w_i * NLL_i.

    Starts from the prior and performs at most ``steps`` accepted gradient
    steps on (mean, log_var). Each step halves the rate until the objective
    does not increase beyond ``tol``, so the objective is non-increasing; a
    step that cannot be accepted after 60 halvings terminates the fit.
    ``callback(step, q)`` is invoked on the prior and after each accepted step.
    """
    data = np.asarray(data, dtype=np.float64)
    w = np.asarray(dim_weights, dtype=np.float64)
    if w.shape != (prior.dim,):
        raise DomainError(f"dim_weights shape {w.shape} != ({prior.dim},)")
    if np.any(w < 0.0):
        raise DomainError("dim_weights must be nonnegative")
    if data.ndim != 2 or data.shape[1] != prior.dim:
        raise DomainError(f"data shape {data.shape} does not match dimension {prior.dim}")
    m1 = data.mean(axis=0)
    m2 = (data * data).mean(axis=0)

    mean = prior.mean.copy()
    log_var = prior.log_var.copy()
    obj, g_mean, g_lv = _vb_objective_and_grad(mean, log_var, prior, m1, m2, w)
    if not np.isfinite(obj):
        raise NumericalError("vb_fit: non-finite objective at the prior")
    if callback is not None:
        callback(0, DiagGaussian(mean.copy(), log_var.copy()))
    for step in range(1, steps + 1):
        rate = lr
        accepted = False
        for _ in range(60):
            cand_mean = mean - rate * g_mean
            cand_lv = log_var - rate * g_lv
            cand_obj, cand_gm, cand_glv = _vb_objective_and_grad(cand_mean, cand_lv, prior, m1, m2, w)
            if np.isfinite(cand_obj) and cand_obj <= obj + tol:
                mean, log_var = cand_mean, cand_lv
                obj, g_mean, g_lv = cand_obj, cand_gm, cand_glv
                accepted = True
                break
            rate *= 0.5
        if not accepted:
            break
        if callback is not None:
            callback(step, DiagGaussian(mean.copy(), log_var.copy()))
    return DiagGaussian(mean, log_var)


def pretrain_linear(dataset, eta_star: float, steps: int, seed: int = 0, batch_size: int = 64) -> LinearModel:
    """Cross-entropy pretraining from zero parameters; the stand-in for a fixed
    pretrained model. The returned model's init snapshot is the trained point."""
    from . import _kernels  # deferred: kernels depend on this module's types
    from .losses import DEFAULT_TAU

    X = dataset.features
    y = dataset.labels
    C = dataset.num_classes
    d = X.shape[1]
    if steps < 0:
        raise DomainError("steps must be >= 0")
    theta = np.zeros(C * d + C)
    if steps > 0:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5052]))
        B = min(batch_size, X.shape[0])
        batch_idx = rng.integers(0, X.shape[0], size=(steps, B), dtype=np.int64)
        w = np.zeros(9)
        w[0] = 1.0  # cross-entropy only
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        status = _kernels.finetune_linear(
            theta, theta.copy(), X, y, w, eta_star, 0.0, DEFAULT_TAU,
            batch_idx, 0, steps, m, v, C,
        )
        if status != 0:
            raise NumericalError("pretraining diverged")
    layout = ParamLayout.linear(C, d)
    return LinearModel(ParamVector(theta, layout))
