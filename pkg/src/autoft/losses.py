"""The nine loss terms of the learnable fine-tuning objective, with analytic gradients.

Every term shares the signature ``term(params, init, batch, forward)`` and
returns ``(value, grad)``, where ``grad`` is flat over the parameter vector.
``forward`` supplies the model structure: it computes logits, backpropagates a
logit-space gradient into parameter space, and exposes the class-prototype
rows consumed by the contrastive term (see :class:`autoft.models.LinearForward`).

Conventions fixed here:

* hinge is the multiclass max-margin form ``max(0, 1 + max_{j!=y} s_j - s_y)``
  with subgradient 0 at the kink;
* confidence minimization is the mean maximum softmax probability;
* the contrastive term is a symmetric InfoNCE between L2-normalized sample
  features and L2-normalized prototype rows at fixed temperature ``DEFAULT_TAU``;
* norm and distance terms average over parameters, so the effective weight
  range stays comparable across model sizes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .errors import DomainError, NumericalError

#: Fixed temperature of the contrastive term (not searched).
DEFAULT_TAU = 0.1

#: Canonical term order; index i matches weight i of the composite objective.
TERM_NAMES: Tuple[str, ...] = (
    "cross_entropy",
    "hinge",
    "contrastive",
    "entropy",
    "confidence_min",
    "l1_norm",
    "l2_norm",
    "l1_init",
    "l2_init",
)


@dataclass(frozen=True)
class LossWeights:
    """Nonnegative coefficients of the composite objective, in canonical order."""

    w_ce: float = 0.0
    w_hinge: float = 0.0
    w_contrastive: float = 0.0
    w_entropy: float = 0.0
    w_confmin: float = 0.0
    w_l1norm: float = 0.0
    w_l2norm: float = 0.0
    w_l1init: float = 0.0
    w_l2init: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0.0:
                raise DomainError(f"loss weight {f.name} must be finite and >= 0, got {v}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "LossWeights":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (9,):
            raise DomainError(f"expected 9 weights, got shape {values.shape}")
        names = [f.name for f in fields(cls)]
        return cls(**dict(zip(names, map(float, values))))

    def to_json(self, normalize: bool = False) -> str:
        """Serialize keyed by the canonical names; ``normalize`` divides by w_ce."""
        doc = {f.name: getattr(self, f.name) for f in fields(self)}
        if normalize:
            if self.w_ce <= 0.0:
                raise DomainError("cannot normalize by w_ce = 0")
            doc = {k: v / self.w_ce for k, v in doc.items()}
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LossWeights":
        return cls(**json.loads(text))


@dataclass
class LossBreakdown:
    """Per-term values, weighted total, and the full flat gradient.

    Terms whose weight is zero are skipped; their entry in ``values`` is None
    unless the composite was evaluated with ``compute_all=True``.
    """

    values: Dict[str, Optional[float]]
    total: float
    gradient: np.ndarray


def _check_batch(batch) -> Tuple[np.ndarray, np.ndarray]:
    X, y = batch
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DomainError("empty batch")
    if y.shape != (X.shape[0],):
        raise DomainError(f"label shape {y.shape} does not match batch of {X.shape[0]}")
    return X, y.astype(np.int64)


def _check_labels(y: np.ndarray, n_classes: int) -> None:
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise DomainError(f"labels must lie in [0, {n_classes})")


def _finite(name: str, value: float, grad: np.ndarray) -> Tuple[float, np.ndarray]:
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NumericalError(f"{name}: non-finite intermediate")
    return float(value), grad


def _log_softmax(S: np.ndarray) -> np.ndarray:
    shifted = S - S.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_term(params, init, batch, forward):
    """Mean negative log softmax probability of the true class."""
    X, y = _check_batch(batch)
    S = forward.logits(params.values, X)
    _check_labels(y, S.shape[1])
    logp = _log_softmax(S)
    n = X.shape[0]
    value = -logp[np.arange(n), y].mean()
    dS = np.exp(logp)
    dS[np.arange(n), y] -= 1.0
    grad = forward.grad_from_logits(X, dS / n)
    return _finite("cross_entropy", value, grad)


def hinge_term(params, init, batch, forward):
    """Multiclass margin loss: mean of max(0, 1 + max_{j!=y} s_j - s_y)."""
    X, y = _check_batch(batch)
    S = forward.logits(params.values, X)
    n, C = S.shape
    if C < 2:
        raise DomainError("hinge requires at least 2 classes")
    _check_labels(y, C)
    rows = np.arange(n)
    masked = S.copy()
    masked[rows, y] = -np.inf
    rival = masked.argmax(axis=1)  # ties break toward the lowest index
    margin = 1.0 + S[rows, rival] - S[rows, y]
    value = np.maximum(margin, 0.0).mean()
    dS = np.zeros_like(S)
    active = margin > 0.0  # subgradient 0 exactly at the kink
    dS[rows[active], rival[active]] += 1.0
    dS[rows[active], y[active]] -= 1.0
    grad = forward.grad_from_logits(X, dS / n)
    return _finite("hinge", value, grad)


def contrastive_term(params, init, batch, forward, tau: float = DEFAULT_TAU):
    """Symmetric InfoNCE between normalized features and normalized prototype rows.

    Direction one treats each sample's similarity row as logits over classes;
    direction two treats each class column as logits over the batch, with a
    uniform target over that class's samples (classes absent from the batch
    contribute nothing). The value is the average of both cross-entropies.
    """
    X, y = _check_batch(batch)
    M = forward.prototypes(params.values)
    C = M.shape[0]
    if C < 2:
        raise DomainError("contrastive requires at least 2 classes")
    _check_labels(y, C)
    n = X.shape[0]
    x_norm = np.linalg.norm(X, axis=1)
    m_norm = np.linalg.norm(M, axis=1)
    if np.any(x_norm == 0.0) or np.any(m_norm == 0.0):
        raise NumericalError("contrastive: zero-norm feature or prototype row")
    Xh = X / x_norm[:, None]
    Mh = M / m_norm[:, None]
    T = (Xh @ Mh.T) / tau  # (n, C)

    rows = np.arange(n)
    logp_sc = _log_softmax(T)
    loss_sc = -logp_sc[rows, y].mean()
    dT = np.exp(logp_sc)
    dT[rows, y] -= 1.0
    dT /= n

    logp_cs = _log_softmax(T.T)  # (C, n): per-class softmax over samples
    present = np.unique(y)
    p_cs = np.exp(logp_cs)
    loss_cs = 0.0
    dTt = np.zeros_like(logp_cs)
    for c in present:
        member = y == c
        k = int(member.sum())
        loss_cs += -logp_cs[c, member].mean()
        target = member.astype(np.float64) / k
        dTt[c] += p_cs[c] - target
    loss_cs /= present.size
    dT += dTt.T / present.size

    value = 0.5 * (loss_sc + loss_cs)
    dT *= 0.5 / tau
    dMh = dT.T @ Xh  # (C, d)
    # chain rule through the row normalization of M
    dM = (dMh - (dMh * Mh).sum(axis=1, keepdims=True) * Mh) / m_norm[:, None]
    grad = forward.grad_from_prototypes(dM)
    return _finite("contrastive", value, grad)


def entropy_term(params, init, batch, forward):
    """Mean Shannon entropy of the softmax predictive distribution."""
    X, y = _check_batch(batch)
    S = forward.logits(params.values, X)
    logp = _log_softmax(S)
    p = np.exp(logp)
    H = -(p * logp).sum(axis=1)
    value = H.mean()
    n = X.shape[0]
    dS = -p * (logp + H[:, None]) / n
    grad = forward.grad_from_logits(X, dS)
    return _finite("entropy", value, grad)


def confidence_min_term(params, init, batch, forward):
    """Mean maximum softmax probability; positive weight penalizes overconfidence."""
    X, y = _check_batch(batch)
    S = forward.logits(params.values, X)
    logp = _log_softmax(S)
    p = np.exp(logp)
    n = X.shape[0]
    star = S.argmax(axis=1)  # argmax of p coincides; ties toward lowest index
    rows = np.arange(n)
    p_star = p[rows, star]
    value = p_star.mean()
    dS = -p_star[:, None] * p
    dS[rows, star] += p_star
    grad = forward.grad_from_logits(X, dS / n)
    return _finite("confidence_min", value, grad)


def l1_norm_term(params, init, batch, forward):
    """Mean absolute parameter value; sign(0) = 0."""
    v = params.values
    value = np.abs(v).mean()
    grad = np.sign(v) / v.size
    return _finite("l1_norm", value, grad)


def l2_norm_term(params, init, batch, forward):
    """Mean squared parameter value."""
    v = params.values
    value = (v * v).mean()
    grad = 2.0 * v / v.size
    return _finite("l2_norm", value, grad)


def l1_init_term(params, init, batch, forward):
    """Mean absolute distance to the pretrained parameters."""
    diff = params.values - init.values
    value = np.abs(diff).mean()
    grad = np.sign(diff) / diff.size
    return _finite("l1_init", value, grad)


def l2_init_term(params, init, batch, forward):
    """Mean squared distance to the pretrained parameters."""
    diff = params.values - init.values
    value = (diff * diff).mean()
    grad = 2.0 * diff / diff.size
    return _finite("l2_init", value, grad)


_TERM_FNS: Tuple[Callable, ...] = (
    cross_entropy_term,
    hinge_term,
    contrastive_term,
    entropy_term,
    confidence_min_term,
    l1_norm_term,
    l2_norm_term,
    l1_init_term,
    l2_init_term,
)


def composite_grad(params, init, batch, w: np.ndarray, forward, tau: float = DEFAULT_TAU):
    """Lean weighted sum over active terms: returns ``(total, grad)`` only."""
    total = 0.0
    grad = np.zeros_like(params.values)
    for i, fn in enumerate(_TERM_FNS):
        wi = w[i]
        if wi == 0.0:
            continue
        if fn is contrastive_term:
            value, g = fn(params, init, batch, forward, tau)
        else:
            value, g = fn(params, init, batch, forward)
        total += wi * value
        grad += wi * g
    return total, grad


def composite_loss(
    params,
    init,
    batch,
    weights: LossWeights,
    forward,
    tau: float = DEFAULT_TAU,
    compute_all: bool = False,
) -> LossBreakdown:
    """Weighted composite objective with per-term reporting.

    Terms with weight zero are skipped (value None) unless ``compute_all`` is
    set, in which case they are evaluated for reporting but still contribute
    nothing to the total or gradient.
    """
    w = weights.as_array()
    values: Dict[str, Optional[float]] = {}
    total = 0.0
    grad = np.zeros_like(params.values)
    for i, (name, fn) in enumerate(zip(TERM_NAMES, _TERM_FNS)):
        if w[i] == 0.0 and not compute_all:
            values[name] = None
            continue
        if fn is contrastive_term:
            value, g = fn(params, init, batch, forward, tau)
        else:
            value, g = fn(params, init, batch, forward)
        values[name] = value
        if w[i] != 0.0:
            total += w[i] * value
            grad += w[i] * g
    return LossBreakdown(values=values, total=float(total), gradient=grad)
