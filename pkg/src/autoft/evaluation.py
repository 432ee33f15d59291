"""Metrics, weight-space ensembling, and robustness-curve emission.

Metrics take (model, dataset) and return a value in [0, 1]. Argmax ties break
toward the lowest class index everywhere. Macro F1 averages over the model's
full label space; a class with no true and no predicted instances contributes
an F1 of 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import DomainError
from .models import LinearModel, ParamVector


def _predictions(model: LinearModel, dataset) -> np.ndarray:
    logits = model.logits(dataset.features)
    return logits.argmax(axis=1)


def top1(model: LinearModel, dataset) -> float:
    """Fraction of rows whose argmax logit equals the label."""
    if dataset.n == 0:
        raise DomainError("empty dataset")
    preds = _predictions(model, dataset)
    return float(np.count_nonzero(preds == dataset.labels) / dataset.n)


def macro_f1(model: LinearModel, dataset) -> float:
    """Unweighted mean of per-class F1 over the model's label space."""
    if dataset.n == 0:
        raise DomainError("empty dataset")
    C = model.num_classes
    if dataset.labels.max() >= C:
        raise DomainError("labels exceed the model's classes")
    preds = _predictions(model, dataset)
    y = dataset.labels
    total = 0.0
    for c in range(C):
        tp = int(np.count_nonzero((preds == c) & (y == c)))
        fp = int(np.count_nonzero((preds == c) & (y != c)))
        fn = int(np.count_nonzero((preds != c) & (y == c)))
        denom = 2 * tp + fp + fn
        total += (2 * tp / denom) if denom > 0 else 0.0
    return float(total / C)


def worst_group_acc(model: LinearModel, dataset) -> float:
    """Minimum per-group top-1 accuracy; empty groups are excluded."""
    if dataset.groups is None:
        raise DomainError("dataset has no group tags")
    if dataset.n == 0:
        raise DomainError("empty dataset")
    preds = _predictions(model, dataset)
    correct = preds == dataset.labels
    worst = 1.0
    for g in np.unique(dataset.groups):
        member = dataset.groups == g
        worst = min(worst, float(np.count_nonzero(correct & member) / np.count_nonzero(member)))
    return worst


METRICS = {"top1": top1, "macro_f1": macro_f1, "worst_group": worst_group_acc}


def wise_interpolate(theta0: ParamVector, theta_ft: ParamVector, alpha: float) -> ParamVector:
    """(1 - alpha) * theta0 + alpha * theta_ft; alpha=0 returns theta0 exactly."""
    if theta0.layout != theta_ft.layout:
        raise DomainError("parameter vectors must share a layout")
    return ParamVector((1.0 - alpha) * theta0.values + alpha * theta_ft.values, theta0.layout)


@dataclass
class CurvePoint:
    alpha: float
    id_score: float
    ood_scores: Dict[str, float]


def ensemble_sweep(
    theta0: ParamVector,
    theta_ft: ParamVector,
    d_id_val,
    d_tests: Dict[str, "object"],
    grid_size: int = 10,
    metric: str = "top1",
) -> Tuple[List[CurvePoint], float]:
    """Evaluate the inclusive uniform alpha grid and pick the ID-val argmax.

    Ties on the ID score resolve toward the larger alpha (favor the fine-tuned
    model). Returns the curve and the chosen coefficient.
    """
    if grid_size < 2:
        raise DomainError("grid_size must be >= 2")
    metric_fn = METRICS[metric]
    curve: List[CurvePoint] = []
    chosen = 0.0
    best_id = -np.inf
    for alpha in np.linspace(0.0, 1.0, grid_size):
        model = LinearModel(wise_interpolate(theta0, theta_ft, float(alpha)), theta0)
        id_score = metric_fn(model, d_id_val)
        oods = {name: metric_fn(model, ds) for name, ds in sorted(d_tests.items())}
        curve.append(CurvePoint(float(alpha), id_score, oods))
        if id_score >= best_id:  # >= pushes ties to the larger alpha
            best_id = id_score
            chosen = float(alpha)
    return curve, chosen


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def effective_robustness_rows(curve: Sequence[CurvePoint], zeroshot_scores: Dict[str, float]) -> List[str]:
    """Data rows: alpha, id, per-shift scores, per-shift gains over zero-shot."""
    shift_names = sorted(curve[0].ood_scores)
    if set(zeroshot_scores) != set(shift_names):
        raise DomainError("zero-shot scores must cover exactly the curve's shifts")
    rows = []
    for point in curve:
        cells = [_fmt(point.alpha), _fmt(point.id_score)]
        cells += [_fmt(point.ood_scores[name]) for name in shift_names]
        cells += [_fmt(point.ood_scores[name] - zeroshot_scores[name]) for name in shift_names]
        rows.append(",".join(cells))
    return rows


def curve_csv(curve: Sequence[CurvePoint], zeroshot_scores: Dict[str, float]) -> str:
    """Full CSV document: header then one row per grid point, LF line endings."""
    shift_names = sorted(curve[0].ood_scores)
    header = ",".join(["alpha", "id"] + shift_names + [f"{n}_gain" for n in shift_names])
    return "\n".join([header] + effective_robustness_rows(curve, zeroshot_scores)) + "\n"
