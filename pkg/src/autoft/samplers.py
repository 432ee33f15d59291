"""Outer-loop black-box optimizers behind one suggest/observe contract.

Four samplers: uniform prior sampling, scrambled Sobol, a deliberately minimal
Gaussian-process expected-improvement baseline, and the Parzen-window
good/bad-density sampler that is the product's default. All of them operate in
unit-cube coordinates and map through ``SearchSpace.from_unit``; all are
deterministic given (history, seed). Objectives are maximized.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg as sla
from scipy.special import ndtr, ndtri
from scipy.stats import qmc

from .errors import DomainError, NumericalError
from .space import IntUniform, ParamAssignment, SearchSpace

COMPLETED = "completed"
FAILED = "failed"

_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass
class TrialRecord:
    """One outer-loop evaluation. Failed trials carry no objective."""

    trial_id: int
    assignment: ParamAssignment
    objective: Optional[float]
    status: str
    seed: int
    elapsed: float = 0.0

    def __post_init__(self):
        if self.trial_id < 0:
            raise DomainError("trial_id must be nonnegative")
        if self.status not in (COMPLETED, FAILED):
            raise DomainError(f"unknown status {self.status!r}")
        if self.status == FAILED and self.objective is not None:
            raise DomainError("failed trials carry no objective")
        if self.status == COMPLETED and (self.objective is None or not np.isfinite(self.objective)):
            raise DomainError("completed trials need a finite objective")

    def to_json(self) -> str:
        # elapsed is runtime telemetry and stays out of the serialized log so
        # identical runs produce byte-identical histories
        doc = {
            "trial_id": self.trial_id,
            "assignment": self.assignment,
            "objective": self.objective,
            "status": self.status,
            "seed": self.seed,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrialRecord":
        doc = json.loads(text)
        return cls(
            trial_id=doc["trial_id"],
            assignment=doc["assignment"],
            objective=doc["objective"],
            status=doc["status"],
            seed=doc["seed"],
        )


def records_to_jsonl(records: Sequence[TrialRecord]) -> str:
    return "".join(r.to_json() + "\n" for r in records)


def records_from_jsonl(text: str) -> List[TrialRecord]:
    return [TrialRecord.from_json(line) for line in text.splitlines() if line.strip()]


@dataclass(frozen=True)
class TpeConfig:
    """Parzen-sampler knobs; defaults sized for budgets of a few hundred trials."""

    gamma: float = 0.25
    n_startup: int = 10
    n_candidates: int = 24
    bandwidth_floor: float = 1e-3
    prior_weight: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise DomainError("gamma must lie in (0, 1)")
        if self.n_startup < 1 or self.n_candidates < 1:
            raise DomainError("n_startup and n_candidates must be positive")
        if not (self.bandwidth_floor > 0.0):
            raise DomainError("bandwidth_floor must be positive")
        if self.prior_weight < 0.0 or not np.isfinite(self.prior_weight):
            raise DomainError("prior_weight must be finite and nonnegative")


def _completed(history: Sequence[TrialRecord]) -> List[TrialRecord]:
    return [r for r in history if r.status == COMPLETED]


def split_good_bad(history: Sequence[TrialRecord], gamma: float) -> Tuple[List[TrialRecord], List[TrialRecord]]:
    """Top ceil(gamma * n) completed trials by objective (>= 1), rest are bad.

    Ties break toward the lower trial_id so the partition is deterministic.
    """
    completed = _completed(history)
    if not completed:
        raise DomainError("history has no completed trial")
    order = sorted(completed, key=lambda r: (-r.objective, r.trial_id))
    n_good = min(len(order), max(1, math.ceil(gamma * len(order))))
    return order[:n_good], order[n_good:]


class ParzenDensity:
    """Mixture of truncated Gaussians on [0, 1] plus one uniform prior component.

    Per-kernel bandwidth is the larger adjacent gap in the sorted point set
    (domain edges act as boundary neighbors), clipped to
    [bandwidth_floor, 1]. Mixture weights are uniform over kernels with the
    prior carrying mass proportional to ``prior_weight``.
    """

    def __init__(self, points: Sequence[float], config: TpeConfig):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 1:
            raise DomainError("points must be 1-D")
        if np.any(pts < 0.0) or np.any(pts > 1.0):
            raise DomainError("points must lie in [0, 1]")
        if pts.size == 0 and config.prior_weight == 0.0:
            raise DomainError("empty point set with zero prior weight")
        self.prior_weight = config.prior_weight
        if pts.size:
            order = np.argsort(pts, kind="stable")
            xs = pts[order]
            ext = np.concatenate([[0.0], xs, [1.0]])
            left = ext[1:-1] - ext[:-2]
            right = ext[2:] - ext[1:-1]
            bw = np.clip(np.maximum(left, right), config.bandwidth_floor, 1.0)
            self.mu = xs
            self.sigma = bw
            # truncation mass of each kernel on [0, 1]
            self._z = ndtr((1.0 - xs) / bw) - ndtr((0.0 - xs) / bw)
        else:
            self.mu = np.empty(0)
            self.sigma = np.empty(0)
            self._z = np.empty(0)
        self._total = self.prior_weight + self.mu.size

    def pdf(self, u) -> np.ndarray:
        """Density at u (vectorized); zero outside [0, 1]."""
        u = np.atleast_1d(np.asarray(u, dtype=np.float64))
        inside = (u >= 0.0) & (u <= 1.0)
        out = np.where(inside, self.prior_weight, 0.0).astype(np.float64)
        if self.mu.size:
            z = (u[:, None] - self.mu[None, :]) / self.sigma[None, :]
            kern = np.exp(-0.5 * z * z) / (_SQRT_2PI * self.sigma[None, :] * self._z[None, :])
            out = out + np.where(inside[:, None], kern, 0.0).sum(axis=1)
        return out / self._total

    def sample(self, rng: np.random.Generator) -> float:
        """One draw: pick a component, then inverse-cdf the truncated kernel."""
        r = rng.random() * self._total
        if r < self.prior_weight or self.mu.size == 0:
            return float(rng.random())
        k = min(int(r - self.prior_weight), self.mu.size - 1)
        lo = ndtr((0.0 - self.mu[k]) / self.sigma[k])
        hi = ndtr((1.0 - self.mu[k]) / self.sigma[k])
        u = self.mu[k] + self.sigma[k] * ndtri(lo + rng.random() * (hi - lo))
        return float(min(max(u, 0.0), 1.0))


def parzen_density(points: Sequence[float], config: TpeConfig) -> ParzenDensity:
    return ParzenDensity(points, config)


def _unit_matrix(space: SearchSpace, records: Sequence[TrialRecord]) -> np.ndarray:
    return np.array([space.to_unit(r.assignment) for r in records], dtype=np.float64)


def tpe_suggest(
    history: Sequence[TrialRecord],
    space: SearchSpace,
    config: TpeConfig,
    rng_seed: int,
) -> ParamAssignment:
    """Suggest the candidate maximizing pdf_good / pdf_bad per dimension.

    Falls back to prior sampling until ``n_startup`` completed trials exist.
    Densities are built independently per dimension in unit coordinates;
    integer dimensions are scored at their bucket midpoints.
    """
    rng = np.random.default_rng(rng_seed)
    completed = _completed(history)
    if len(completed) < config.n_startup:
        return space.sample(rng)
    good, bad = split_good_bad(completed, config.gamma)
    u_good = _unit_matrix(space, good)
    u_bad = _unit_matrix(space, bad)
    u = np.empty(space.dim)
    for j, (name, dom) in enumerate(space):
        dens_good = ParzenDensity(u_good[:, j], config)
        dens_bad = ParzenDensity(u_bad[:, j] if u_bad.size else [], config)
        cands = np.array([dens_good.sample(rng) for _ in range(config.n_candidates)])
        if isinstance(dom, IntUniform):
            snapped = np.array([dom.to_unit(dom.from_unit(c)) for c in cands])
        else:
            snapped = cands
        scores = dens_good.pdf(snapped) / dens_bad.pdf(snapped)
        u[j] = cands[int(np.argmax(scores))]
    return space.from_unit(u)


def _sobol_points(dim: int, n: int, scramble_seed: Optional[int]) -> np.ndarray:
    with warnings.catch_warnings():
        # short non-power-of-two draws are deliberate here
        warnings.simplefilter("ignore", UserWarning)
        engine = qmc.Sobol(d=dim, scramble=scramble_seed is not None, seed=scramble_seed)
        return engine.random(n)


def qmc_suggest(counter: int, space: SearchSpace, scramble_seed: Optional[int]) -> ParamAssignment:
    """The counter-th point of a (scrambled) base-2 digital sequence.

    ``scramble_seed=None`` yields the raw sequence; any integer seed applies
    deterministic scrambling.
    """
    if counter < 0:
        raise DomainError("counter must be nonnegative")
    pts = _sobol_points(space.dim, counter + 1, scramble_seed)
    return space.from_unit(pts[-1])


def gp_ei_suggest(
    history: Sequence[TrialRecord],
    space: SearchSpace,
    rng_seed: int,
    length_scale: float = 0.2,
    jitter: float = 1e-6,
    n_candidates: int = 512,
    n_local: int = 32,
    local_scale: float = 0.05,
) -> ParamAssignment:
    """Expected improvement under a fixed squared-exponential Gaussian process.

    Objectives are standardized; the kernel has unit signal variance and fixed
    length scale. Candidates are uniform draws plus a Gaussian neighborhood of
    the incumbent. Deliberately minimal: this is a comparison baseline.
    """
    rng = np.random.default_rng(rng_seed)
    completed = _completed(history)
    if len(completed) < 2:
        return space.sample(rng)
    X = _unit_matrix(space, completed)
    yv = np.array([r.objective for r in completed], dtype=np.float64)
    std = yv.std()
    y_std = (yv - yv.mean()) / (std if std > 1e-12 else 1.0)

    sq = ((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
    K = np.exp(-sq / (2.0 * length_scale**2))
    L = None
    jit = jitter
    for _ in range(4):
        try:
            L = sla.cholesky(K + jit * np.eye(len(X)), lower=True)
            break
        except np.linalg.LinAlgError:
            jit *= 2.0
        except sla.LinAlgError:
            jit *= 2.0
    if L is None:
        raise NumericalError("gp_ei_suggest: kernel matrix not positive definite after jitter escalation")
    alpha = sla.cho_solve((L, True), y_std)

    incumbent = X[int(np.argmax(y_std))]
    cands = rng.random((n_candidates, space.dim))
    local = np.clip(incumbent + local_scale * rng.standard_normal((n_local, space.dim)), 0.0, 1.0)
    cand = np.vstack([cands, local, incumbent[None, :]])

    sq_star = ((cand[:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
    k_star = np.exp(-sq_star / (2.0 * length_scale**2))
    mu = k_star @ alpha
    vchol = sla.solve_triangular(L, k_star.T, lower=True)
    var = np.maximum(1.0 + jit - (vchol**2).sum(axis=0), 1e-18)
    s = np.sqrt(var)
    best = y_std.max()
    z = (mu - best) / s
    ei = s * (z * ndtr(z) + np.exp(-0.5 * z * z) / _SQRT_2PI)
    return space.from_unit(cand[int(np.argmax(ei))])


SAMPLER_KINDS = ("random", "qmc", "gp_ei", "tpe")


class Sampler:
    """Stateful front end over the functional samplers.

    Single-writer: suggest/observe must be externally serialized. ``best``
    tracks the max-objective completed trial, ties broken by earlier trial_id.
    """

    def __init__(
        self,
        kind: str,
        space: SearchSpace,
        tpe_config: Optional[TpeConfig] = None,
        scramble_seed: Optional[int] = 0,
    ):
        if kind not in SAMPLER_KINDS:
            raise DomainError(f"unknown sampler kind {kind!r}; choose from {SAMPLER_KINDS}")
        self.kind = kind
        self.space = space
        self.tpe_config = tpe_config or TpeConfig()
        self.scramble_seed = scramble_seed
        self.history: List[TrialRecord] = []
        self._ids: set = set()
        self._best: Optional[TrialRecord] = None
        self._counter = 0  # qmc position

    def suggest(self, rng_seed: int) -> ParamAssignment:
        if self.kind == "random":
            return self.space.sample(np.random.default_rng(rng_seed))
        if self.kind == "qmc":
            a = qmc_suggest(self._counter, self.space, self.scramble_seed)
            self._counter += 1
            return a
        if self.kind == "gp_ei":
            return gp_ei_suggest(self.history, self.space, rng_seed)
        return tpe_suggest(self.history, self.space, self.tpe_config, rng_seed)

    def observe(self, record: TrialRecord) -> None:
        self.space.validate(record.assignment)
        if record.trial_id in self._ids:
            raise DomainError(f"trial_id {record.trial_id} already observed")
        self._ids.add(record.trial_id)
        self.history.append(record)
        if record.status == COMPLETED:
            if self._best is None or record.objective > self._best.objective:
                self._best = record

    def best(self) -> Optional[TrialRecord]:
        return self._best


def make_sampler(
    kind: str,
    space: SearchSpace,
    tpe_config: Optional[TpeConfig] = None,
    scramble_seed: Optional[int] = 0,
) -> Sampler:
    return Sampler(kind, space, tpe_config=tpe_config, scramble_seed=scramble_seed)
