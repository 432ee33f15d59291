"""The bi-level loop: sample hyperparameters, short fine-tune, score on the
out-of-distribution validation set, feed back to the sampler; then a full
fine-tune with the best point, early-stopped on in-distribution validation
accuracy.

Every trial restarts from the pretrained parameters. Per-trial randomness is a
splittable mix of (global_seed, trial_id, sigma), so the searched seed sigma
reproducibly alters mini-batch draws. Identical configs and seeds produce
byte-identical trial logs.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .data import BlobFamily, LabeledDataset, ShiftSpec, SplitSizes, gen_gaussian_toy, gen_spurious_blobs, split_dataset
from .errors import DomainError, InnerRunDiverged, StudyFailure
from .evaluation import METRICS
from .losses import DEFAULT_TAU, LossWeights
from .models import DiagGaussian, LinearModel, ParamLayout, ParamVector, gaussian_nll_per_dim, pretrain_linear, vb_fit
from .samplers import COMPLETED, FAILED, Sampler, TpeConfig, TrialRecord, make_sampler
from .space import LogUniform, ParamAssignment, SearchSpace, WEIGHT_NAMES, default_autoft_space

# rng stream tag for the final fine-tune, disjoint from every trial's stream
_FINAL_STREAM = 0x46494E41


@dataclass(frozen=True)
class HyperParams:
    """One sampled point of the canonical space: loss weights, optimizer knobs, seed."""

    weights: LossWeights
    eta: float
    delta: float
    sigma: int

    def to_assignment(self) -> ParamAssignment:
        a: ParamAssignment = {name: getattr(self.weights, name) for name in WEIGHT_NAMES}
        a["lr"] = self.eta
        a["weight_decay"] = self.delta
        a["seed"] = float(self.sigma)
        return a

    @classmethod
    def from_assignment(cls, assignment: ParamAssignment) -> "HyperParams":
        expected = set(WEIGHT_NAMES) | {"lr", "weight_decay", "seed"}
        if set(assignment) != expected:
            raise DomainError(f"assignment keys {sorted(assignment)} do not form canonical hyperparameters")
        weights = LossWeights(**{name: assignment[name] for name in WEIGHT_NAMES})
        return cls(
            weights=weights,
            eta=float(assignment["lr"]),
            delta=float(assignment["weight_decay"]),
            sigma=int(assignment["seed"]),
        )

    def to_dict(self) -> dict:
        return {
            "weights": {name: getattr(self.weights, name) for name in WEIGHT_NAMES},
            "eta": self.eta,
            "delta": self.delta,
            "sigma": self.sigma,
        }


@dataclass
class EngineConfig:
    """Inner/outer loop sizes, metric, sampler, and schedule of a study."""

    inner_steps: int = 10
    trials: int = 500
    val_size: int = 1000
    metric: str = "top1"
    sampler: str = "tpe"
    final_steps: int = 800
    eval_every: int = 25
    patience: int = 8
    global_seed: int = 0
    batch_size: int = 64
    tpe: TpeConfig = field(default_factory=TpeConfig)

    def __post_init__(self):
        if self.inner_steps < 0:
            raise DomainError("inner_steps must be >= 0")
        for name in ("trials", "val_size", "final_steps", "eval_every", "patience", "batch_size"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive")
        if self.metric not in METRICS:
            raise DomainError(f"unknown metric {self.metric!r}")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["tpe"] = asdict(self.tpe)
        return doc


@dataclass
class BudgetReport:
    """Inner-step accounting: the search budget versus the final run."""

    trial_steps: int
    final_steps_run: int
    pretrain_steps: int = 0
    wall_time_s: float = 0.0

    @property
    def total_steps(self) -> int:
        return self.trial_steps + self.final_steps_run

    def to_dict(self) -> dict:
        return {
            "trial_steps": self.trial_steps,
            "final_steps_run": self.final_steps_run,
            "pretrain_steps": self.pretrain_steps,
            "total_steps": self.total_steps,
            "search_overhead_ratio": (self.trial_steps / self.final_steps_run) if self.final_steps_run else None,
            "wall_time_s": self.wall_time_s,
        }


@dataclass
class StudyResult:
    history: List[TrialRecord]
    best: HyperParams
    best_objective: float
    best_trial_id: int
    final_model: LinearModel
    budget: BudgetReport


def _trial_rng(global_seed: int, trial_id: int, sigma: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([global_seed, trial_id, sigma]))


def _suggest_seed(global_seed: int, trial_id: int) -> int:
    return int(np.random.SeedSequence([global_seed, trial_id]).generate_state(1)[0])


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def trial_eval(
    model0: LinearModel,
    phi: HyperParams,
    d_tr: LabeledDataset,
    d_val: LabeledDataset,
    config: EngineConfig,
    trial_id: int = 0,
) -> float:
    """Clone the pretrained model, run exactly K composite-loss AdamW steps,
    and score the result on the validation set. Raises
    :class:`InnerRunDiverged` on a non-finite loss so the caller can mark the
    trial failed."""
    if d_tr.n == 0 or d_val.n == 0:
        raise DomainError("datasets must be nonempty")
    if config.val_size > d_val.n:
        raise DomainError(f"val_size {config.val_size} exceeds validation size {d_val.n}")
    metric_fn = METRICS[config.metric]
    d_val_use = d_val.take(config.val_size)
    K = config.inner_steps
    if K == 0:
        return float(metric_fn(model0, d_val_use))
    rng = _trial_rng(config.global_seed, trial_id, phi.sigma)
    B = min(config.batch_size, d_tr.n)
    batch_idx = rng.integers(0, d_tr.n, size=(K, B), dtype=np.int64)
    theta = model0.params.values.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    status = _kernels.finetune_linear(
        theta,
        model0.init.values,
        d_tr.features,
        d_tr.labels,
        phi.weights.as_array(),
        phi.eta,
        phi.delta,
        DEFAULT_TAU,
        batch_idx,
        0,
        K,
        m,
        v,
        model0.num_classes,
    )
    if status != 0:
        raise InnerRunDiverged(f"trial {trial_id}: non-finite loss during the short fine-tune")
    return float(metric_fn(model0.with_values(theta), d_val_use))


def _final_finetune(
    model0: LinearModel,
    phi: HyperParams,
    d_tr: LabeledDataset,
    d_val_id: LabeledDataset,
    config: EngineConfig,
) -> Tuple[LinearModel, int]:
    """Full fine-tune with early stopping on ID-validation top-1.

    Checkpoints every ``eval_every`` steps (the starting point counts), keeps
    the best, stops after ``patience`` evaluations without improvement. A
    divergence mid-run ends the run and keeps the best checkpoint so far.
    """
    top1 = METRICS["top1"]
    rng = np.random.default_rng(np.random.SeedSequence([config.global_seed, _FINAL_STREAM, phi.sigma]))
    n = d_tr.n
    B = min(config.batch_size, n)
    T = config.final_steps
    theta = model0.params.values.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    w = phi.weights.as_array()
    best_theta = theta.copy()
    best_score = top1(model0, d_val_id)
    steps_done = 0
    stale = 0
    while steps_done < T:
        chunk = min(config.eval_every, T - steps_done)
        batch_idx = rng.integers(0, n, size=(chunk, B), dtype=np.int64)
        status = _kernels.finetune_linear(
            theta, model0.init.values, d_tr.features, d_tr.labels, w,
            phi.eta, phi.delta, DEFAULT_TAU, batch_idx, steps_done, T, m, v,
            model0.num_classes,
        )
        if status != 0:
            break
        steps_done += chunk
        score = top1(model0.with_values(theta), d_val_id)
        if score > best_score:
            best_score = score
            best_theta = theta.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return LinearModel(ParamVector(best_theta, model0.params.layout), model0.init), steps_done


def autoft_run(
    model0: LinearModel,
    d_tr: LabeledDataset,
    d_val: LabeledDataset,
    space: SearchSpace,
    config: EngineConfig,
    d_val_id: Optional[LabeledDataset] = None,
    on_trial: Optional[Callable[[TrialRecord], None]] = None,
) -> StudyResult:
    """Full study: T suggest/evaluate/observe rounds, then the final fine-tune.

    ``d_val_id`` drives early stopping of the final run; when absent, a 20%
    carve of ``d_tr`` is used (and the remaining 80% trains). Failed trials are
    recorded, not raised; a study where every trial failed raises
    :class:`StudyFailure` carrying the history.
    """
    started = time.perf_counter()
    if d_val_id is None:
        d_tr, d_val_id = split_dataset(d_tr, 0.2, config.global_seed)
    sampler = make_sampler(config.sampler, space, tpe_config=config.tpe, scramble_seed=config.global_seed)
    history: List[TrialRecord] = []
    for trial_id in range(config.trials):
        assignment = sampler.suggest(_suggest_seed(config.global_seed, trial_id))
        phi = HyperParams.from_assignment(assignment)
        t0 = time.perf_counter()
        try:
            objective = trial_eval(model0, phi, d_tr, d_val, config, trial_id)
            record = TrialRecord(trial_id, assignment, objective, COMPLETED, phi.sigma, time.perf_counter() - t0)
        except InnerRunDiverged:
            record = TrialRecord(trial_id, assignment, None, FAILED, phi.sigma, time.perf_counter() - t0)
        sampler.observe(record)
        history.append(record)
        if on_trial is not None:
            on_trial(record)
    best = sampler.best()
    if best is None:
        raise StudyFailure("every trial failed", history)
    phi_star = HyperParams.from_assignment(best.assignment)
    final_model, final_steps = _final_finetune(model0, phi_star, d_tr, d_val_id, config)
    budget = BudgetReport(
        trial_steps=config.trials * config.inner_steps,
        final_steps_run=final_steps,
        wall_time_s=time.perf_counter() - started,
    )
    return StudyResult(
        history=history,
        best=phi_star,
        best_objective=float(best.objective),
        best_trial_id=best.trial_id,
        final_model=final_model,
        budget=budget,
    )


# ---------------------------------------------------------------------------
# run directory
# ---------------------------------------------------------------------------


class RunWriter:
    """Single-writer layout: config.json, trials.jsonl (flushed per trial),
    best.json, final_model.json, budget.json."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._trials_fh = None

    def write_config(self, resolved: dict) -> None:
        (self.out_dir / "config.json").write_text(json.dumps(resolved, sort_keys=True, indent=2) + "\n")

    def append_trial(self, record: TrialRecord) -> None:
        if self._trials_fh is None:
            self._trials_fh = open(self.out_dir / "trials.jsonl", "w", encoding="utf-8")
        self._trials_fh.write(record.to_json() + "\n")
        self._trials_fh.flush()

    def write_best(self, phi: HyperParams, objective: float, trial_id: int) -> None:
        doc = {"hyperparams": phi.to_dict(), "assignment": phi.to_assignment(), "objective": objective, "trial_id": trial_id}
        (self.out_dir / "best.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")

    def write_final_model(self, model: LinearModel) -> None:
        (self.out_dir / "final_model.json").write_text(model.to_json() + "\n")

    def write_budget(self, budget: BudgetReport) -> None:
        (self.out_dir / "budget.json").write_text(json.dumps(budget.to_dict(), sort_keys=True, indent=2) + "\n")

    def close(self) -> None:
        if self._trials_fh is not None:
            self._trials_fh.close()
            self._trials_fh = None


# ---------------------------------------------------------------------------
# sampler comparison and validation-choice ablation
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkSetup:
    """A ready-to-run benchmark: data family, pretrained model, space, config."""

    family: BlobFamily
    model0: LinearModel
    space: SearchSpace
    config: EngineConfig
    id_test: str = "id"
    ood_test: str = "ood"


# benchmark constants: mildly undertrained pretraining on decorrelated data so
# fine-tuning has real headroom, and a strong spurious shortcut in d_tr
BENCH_ETA_STAR = 0.03
BENCH_PRETRAIN_STEPS = 120


def default_blob_benchmark(seed: int = 0, metric: str = "top1", trials: int = 100) -> BenchmarkSetup:
    """The canonical desk-scale benchmark used by the comparison commands."""
    family = gen_spurious_blobs(
        n_classes=3,
        dim=8,
        spec_id=ShiftSpec(seed=1),
        spec_val=ShiftSpec(spurious_flip=0.5, seed=2),
        spec_tests={"id": ShiftSpec(seed=3), "ood": ShiftSpec(spurious_flip=0.5, seed=4)},
        sizes=SplitSizes(pretrain=2000, train=400, val=200, test=1000),
        seed=seed,
        margin=1.6,
        spurious_scale=3.0,
    )
    model0 = pretrain_linear(family.pretrain, eta_star=BENCH_ETA_STAR, steps=BENCH_PRETRAIN_STEPS, seed=seed)
    space = default_autoft_space(BENCH_ETA_STAR)
    config = EngineConfig(
        inner_steps=10,
        trials=trials,
        val_size=200,
        metric=metric,
        sampler="tpe",
        final_steps=300,
        eval_every=25,
        patience=8,
        global_seed=seed,
    )
    return BenchmarkSetup(family=family, model0=model0, space=space, config=config)


@dataclass
class CompareRow:
    sampler: str
    repeat: int
    id_score: float
    ood_score: float
    best_objective: float
    trials_used: int


@dataclass
class CompareResult:
    rows: List[CompareRow]
    summary: Dict[str, Dict[str, float]]


def _median_iqr(values: Sequence[float]) -> Tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(np.median(v)), float(np.percentile(v, 75) - np.percentile(v, 25))


def compare_samplers(
    setup: BenchmarkSetup,
    samplers: Sequence[str],
    budget: int,
    repeats: int,
    base_seed: int = 0,
) -> CompareResult:
    """One study per (sampler, repeat) with disjoint seeds and a shared budget;
    medians and interquartile ranges of the final model's ID and OOD scores."""
    metric_fn = METRICS[setup.config.metric]
    rows: List[CompareRow] = []
    for si, sampler in enumerate(samplers):
        for rep in range(repeats):
            config = replace(
                setup.config,
                sampler=sampler,
                trials=budget,
                global_seed=_derived_seed(base_seed, si, rep),
            )
            result = autoft_run(
                setup.model0,
                setup.family.train,
                setup.family.val_ood,
                setup.space,
                config,
                d_val_id=setup.family.val_id,
            )
            rows.append(
                CompareRow(
                    sampler=sampler,
                    repeat=rep,
                    id_score=float(metric_fn(result.final_model, setup.family.tests[setup.id_test])),
                    ood_score=float(metric_fn(result.final_model, setup.family.tests[setup.ood_test])),
                    best_objective=result.best_objective,
                    trials_used=len(result.history),
                )
            )
    summary: Dict[str, Dict[str, float]] = {}
    for sampler in samplers:
        ids = [r.id_score for r in rows if r.sampler == sampler]
        oods = [r.ood_score for r in rows if r.sampler == sampler]
        id_med, id_iqr = _median_iqr(ids)
        ood_med, ood_iqr = _median_iqr(oods)
        summary[sampler] = {
            "id_median": id_med,
            "id_iqr": id_iqr,
            "ood_median": ood_med,
            "ood_iqr": ood_iqr,
        }
    return CompareResult(rows=rows, summary=summary)


def val_choice_ablation(setup: BenchmarkSetup, seeds: int, budget: int, base_seed: int = 0) -> Dict[str, Dict]:
    """Optimize against the OOD validation split versus a fresh ID split and
    compare the final models' OOD-test scores over several seeds."""
    metric_fn = METRICS[setup.config.metric]
    arms = {"ood_val": setup.family.val_ood, "id_val": setup.family.val_id}
    out: Dict[str, Dict] = {}
    for ai, (arm, d_val) in enumerate(arms.items()):
        scores = []
        for s in range(seeds):
            config = replace(setup.config, trials=budget, global_seed=_derived_seed(base_seed, ai, s))
            result = autoft_run(
                setup.model0,
                setup.family.train,
                d_val,
                setup.space,
                config,
                d_val_id=setup.family.val_id,
            )
            scores.append(float(metric_fn(result.final_model, setup.family.tests[setup.ood_test])))
        med, iqr = _median_iqr(scores)
        out[arm] = {"scores": scores, "median": med, "iqr": iqr}
    return out


# ---------------------------------------------------------------------------
# density-fitting study (three arms over per-dimension weights)
# ---------------------------------------------------------------------------

DIDACTIC_ARMS = ("global", "dimwise", "dimwise-averaged")


@dataclass
class DidacticArm:
    name: str
    weights: np.ndarray
    id_nll: np.ndarray
    ood_nll: np.ndarray

    @property
    def final_ood_nll(self) -> float:
        return float(self.ood_nll[-1])

    @property
    def final_id_nll(self) -> float:
        return float(self.id_nll[-1])


@dataclass
class DidacticResult:
    arms: Dict[str, DidacticArm]
    d: int
    trials: int
    steps: int
    seed: int


def didactic_run(
    d: int = 10,
    steps: int = 300,
    trials: int = 300,
    seed: int = 0,
    n_train: int = 500,
    n_val: int = 100,
    n_test: int = 1000,
    lr: float = 0.1,
    tpe_config: Optional[TpeConfig] = None,
) -> DidacticResult:
    """Search per-dimension data weights of the Gaussian fitter to maximize
    validation log-likelihood; three arms: one shared weight, per-dimension
    weights, and the per-dimension solution naively averaged into one weight.

    With ``trials=0`` no search happens and every arm reports the prior's NLL.
    """
    train, val, test = gen_gaussian_toy(d, n_train, n_val, n_test, seed)
    prior = DiagGaussian.standard(d)
    tpe_config = tpe_config or TpeConfig()

    def fit(weights: np.ndarray, callback=None) -> DiagGaussian:
        return vb_fit(prior, train.features, weights, steps, lr, callback=callback)

    def val_objective(q: DiagGaussian) -> float:
        return -float(gaussian_nll_per_dim(q, val.features).sum())

    def search(n_dims: int, arm_index: int) -> np.ndarray:
        if trials == 0:
            return np.zeros(d)
        space = SearchSpace([(f"w{i}", LogUniform(1e-4, 10.0)) for i in range(n_dims)])
        sampler = make_sampler("tpe", space, tpe_config=tpe_config)
        for tid in range(trials):
            assignment = sampler.suggest(_derived_seed(seed, arm_index, tid))
            wvec = np.array([assignment[f"w{i}"] for i in range(n_dims)])
            weights = np.full(d, wvec[0]) if n_dims == 1 else wvec
            objective = val_objective(fit(weights))
            sampler.observe(TrialRecord(tid, assignment, objective, COMPLETED, 0))
        best = sampler.best().assignment
        wvec = np.array([best[f"w{i}"] for i in range(n_dims)])
        return np.full(d, wvec[0]) if n_dims == 1 else wvec

    weight_sets = {}
    weight_sets["global"] = search(1, 0)
    weight_sets["dimwise"] = search(d, 1)
    weight_sets["dimwise-averaged"] = np.full(d, float(weight_sets["dimwise"].mean()))

    arms: Dict[str, DidacticArm] = {}
    for name in DIDACTIC_ARMS:
        id_curve: List[float] = []
        ood_curve: List[float] = []

        def record(step: int, q: DiagGaussian) -> None:
            id_curve.append(float(gaussian_nll_per_dim(q, train.features).sum()))
            ood_curve.append(float(gaussian_nll_per_dim(q, test.features).sum()))

        if trials == 0:
            record(0, prior)
        else:
            fit(weight_sets[name], callback=record)
        arms[name] = DidacticArm(
            name=name,
            weights=weight_sets[name],
            id_nll=np.asarray(id_curve),
            ood_nll=np.asarray(ood_curve),
        )
    return DidacticResult(arms=arms, d=d, trials=trials, steps=steps, seed=seed)
