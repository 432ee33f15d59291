"""Typed hyperparameter domains, unit-cube transforms, and the canonical search space.

A :class:`SearchSpace` is an ordered list of named domains.  Samplers operate in
``[0, 1]^d`` through the bijections :meth:`SearchSpace.to_unit` and
:meth:`SearchSpace.from_unit`; integer domains use half-open buckets so every
integer carries equal prior mass.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Sequence, Tuple, Union

import numpy as np

from .errors import DomainError

#: A sampled point: parameter name -> value (integers represented exactly).
ParamAssignment = Dict[str, float]


@dataclass(frozen=True)
class LogUniform:
    """Positive real range sampled uniformly in log space."""

    lo: float
    hi: float

    kind = "log_uniform"

    def __post_init__(self):
        if not (self.lo > 0.0):
            raise DomainError(f"LogUniform requires lo > 0, got {self.lo}")
        if not (self.lo < self.hi):
            raise DomainError(f"LogUniform requires lo < hi, got ({self.lo}, {self.hi})")

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi

    def to_unit(self, value: float) -> float:
        return (math.log(value) - math.log(self.lo)) / (math.log(self.hi) - math.log(self.lo))

    def from_unit(self, u: float) -> float:
        log_lo = math.log(self.lo)
        v = math.exp(log_lo + u * (math.log(self.hi) - log_lo))
        return min(max(v, self.lo), self.hi)


@dataclass(frozen=True)
class Uniform:
    """Real range sampled uniformly."""

    lo: float
    hi: float

    kind = "uniform"

    def __post_init__(self):
        if not (self.lo < self.hi):
            raise DomainError(f"Uniform requires lo < hi, got ({self.lo}, {self.hi})")

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi

    def to_unit(self, value: float) -> float:
        return (value - self.lo) / (self.hi - self.lo)

    def from_unit(self, u: float) -> float:
        v = self.lo + u * (self.hi - self.lo)
        return min(max(v, self.lo), self.hi)


@dataclass(frozen=True)
class IntUniform:
    """Inclusive integer range; every integer gets one bucket of unit mass."""

    lo: int
    hi: int

    kind = "int_uniform"

    def __post_init__(self):
        if self.lo != int(self.lo) or self.hi != int(self.hi):
            raise DomainError(f"IntUniform bounds must be integers, got ({self.lo}, {self.hi})")
        if not (self.lo <= self.hi):
            raise DomainError(f"IntUniform requires lo <= hi, got ({self.lo}, {self.hi})")

    def contains(self, value: float) -> bool:
        return value == int(value) and self.lo <= value <= self.hi

    def to_unit(self, value: float) -> float:
        # bucket midpoint of the integer's cell
        return (value - self.lo + 0.5) / (self.hi - self.lo + 1)

    def from_unit(self, u: float) -> float:
        n = self.hi - self.lo + 1
        v = self.lo + int(math.floor(u * n))
        return float(min(max(v, self.lo), self.hi))


ParamDomain = Union[LogUniform, Uniform, IntUniform]

_KIND_TO_CLS = {cls.kind: cls for cls in (LogUniform, Uniform, IntUniform)}


class SearchSpace:
    """Ordered, immutable collection of named parameter domains.

    Iteration order equals insertion order and is the coordinate order used by
    ``to_unit`` / ``from_unit``, so unit-cube coordinates are stable across runs.
    """

    def __init__(self, params: Sequence[Tuple[str, ParamDomain]]):
        names = [name for name, _ in params]
        if len(set(names)) != len(names):
            raise DomainError("parameter names must be unique")
        self._params: Tuple[Tuple[str, ParamDomain], ...] = tuple(
            (str(name), domain) for name, domain in params
        )
        self._index = {name: i for i, (name, _) in enumerate(self._params)}

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(name for name, _ in self._params)

    @property
    def dim(self) -> int:
        return len(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[Tuple[str, ParamDomain]]:
        return iter(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, SearchSpace) and self._params == other._params

    def domain(self, name: str) -> ParamDomain:
        try:
            return self._params[self._index[name]][1]
        except KeyError:
            raise DomainError(f"unknown parameter {name!r}") from None

    def validate(self, assignment: ParamAssignment) -> None:
        """Raise :class:`DomainError` naming the first offending parameter."""
        if set(assignment) != set(self._index):
            missing = set(self._index) - set(assignment)
            extra = set(assignment) - set(self._index)
            raise DomainError(f"assignment keys mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
        for name, domain in self._params:
            if not domain.contains(assignment[name]):
                raise DomainError(f"parameter {name!r}: value {assignment[name]!r} outside {domain}")

    def to_unit(self, assignment: ParamAssignment) -> np.ndarray:
        """Map a valid assignment to its unit-cube coordinates."""
        self.validate(assignment)
        return np.array([dom.to_unit(assignment[name]) for name, dom in self._params], dtype=np.float64)

    def from_unit(self, u: Sequence[float]) -> ParamAssignment:
        """Inverse of :meth:`to_unit` up to integer bucket rounding."""
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.dim,):
            raise DomainError(f"unit vector has shape {u.shape}, expected ({self.dim},)")
        if np.any(u < 0.0) or np.any(u > 1.0):
            raise DomainError("unit coordinates must lie in [0, 1]")
        return {name: dom.from_unit(float(ui)) for (name, dom), ui in zip(self._params, u)}

    def sample(self, rng: np.random.Generator) -> ParamAssignment:
        """Draw one point from the prior (uniform on the unit cube)."""
        return self.from_unit(rng.random(self.dim))

    def to_json(self) -> str:
        doc = [
            {"name": name, "kind": dom.kind, "lo": dom.lo, "hi": dom.hi}
            for name, dom in self._params
        ]
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SearchSpace":
        doc = json.loads(text)
        params: List[Tuple[str, ParamDomain]] = []
        for entry in doc:
            try:
                domain_cls = _KIND_TO_CLS[entry["kind"]]
            except KeyError:
                raise DomainError(f"unknown domain kind {entry.get('kind')!r}") from None
            lo, hi = entry["lo"], entry["hi"]
            if domain_cls is IntUniform:
                lo, hi = int(lo), int(hi)
            params.append((entry["name"], domain_cls(lo, hi)))
        return cls(params)


#: Canonical order of the nine loss-weight dimensions.
WEIGHT_NAMES: Tuple[str, ...] = (
    "w_ce",
    "w_hinge",
    "w_contrastive",
    "w_entropy",
    "w_confmin",
    "w_l1norm",
    "w_l2norm",
    "w_l1init",
    "w_l2init",
)

#: Dimensions replicated per group by :func:`grouped_space`.
GROUPED_NAMES: Tuple[str, ...] = (
    "lr",
    "weight_decay",
    "w_l1norm",
    "w_l2norm",
    "w_l1init",
    "w_l2init",
)

WEIGHT_RANGE = (1e-4, 10.0)
SEED_RANGE = (0, 100)


def default_autoft_space(eta_star: float, weight_decay_domain: ParamDomain | None = None) -> SearchSpace:
    """Build the canonical 12-dimensional space around a conventional learning rate.

    Nine loss weights on LogUniform(1e-4, 10), learning rate on
    LogUniform(1e-2 * eta_star, 1e2 * eta_star), weight decay on Uniform(0, 1)
    (override via ``weight_decay_domain``), and an integer seed on [0, 100].
    """
    if not (eta_star > 0.0):
        raise DomainError(f"eta_star must be positive, got {eta_star}")
    params: List[Tuple[str, ParamDomain]] = [
        (name, LogUniform(*WEIGHT_RANGE)) for name in WEIGHT_NAMES
    ]
    params.append(("lr", LogUniform(1e-2 * eta_star, 1e2 * eta_star)))
    params.append(("weight_decay", weight_decay_domain or Uniform(0.0, 1.0)))
    params.append(("seed", IntUniform(*SEED_RANGE)))
    return SearchSpace(params)


def grouped_space(base: SearchSpace, groups: Sequence[str]) -> SearchSpace:
    """Replicate the learning rate, weight decay, and norm/distance weights per group.

    Each grouped dimension is replaced in place by one copy per group, named
    ``"<name>.<group>"``; all other dimensions are unchanged.
    """
    groups = list(groups)
    if not groups:
        raise DomainError("groups must be nonempty")
    if len(set(groups)) != len(groups):
        raise DomainError("duplicate group names")
    params: List[Tuple[str, ParamDomain]] = []
    for name, dom in base:
        if name in GROUPED_NAMES:
            params.extend((f"{name}.{g}", dom) for g in groups)
        else:
            params.append((name, dom))
    return SearchSpace(params)
