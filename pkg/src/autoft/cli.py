"""Command-line front end: run, toy, compare, report.

Machine-readable JSON/CSV goes to files or standard output; everything meant
for humans goes to standard error. Exit codes: 0 success, 2 configuration
error, 3 study failure. The environment variable ``AUTOFT_SEED`` overrides the
configured global seed and is recorded in the resolved config.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Dict, Optional

import jsonschema
import numpy as np

from .data import LabeledDataset, ShiftSpec, SplitSizes, gen_spurious_blobs, load_dataset
from .engine import (
    DIDACTIC_ARMS,
    BenchmarkSetup,
    EngineConfig,
    RunWriter,
    StudyResult,
    autoft_run,
    compare_samplers,
    default_blob_benchmark,
    didactic_run,
)
from .errors import ConfigError, DatasetFormatError, DomainError, StudyFailure
from .evaluation import METRICS, ensemble_sweep
from .models import LinearModel, pretrain_linear
from .samplers import SAMPLER_KINDS, TpeConfig, TrialRecord
from .space import SearchSpace, default_autoft_space

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STUDY = 3

LOCK_NAME = "lock"


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def load_schema() -> dict:
    text = resources.files("autoft.schemas").joinpath("runconfig.schema.json").read_text()
    return json.loads(text)


def _parse_config_text(text: str) -> dict:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        byte_offset = len(text[: exc.pos].encode("utf-8"))
        raise ConfigError(f"malformed JSON at byte offset {byte_offset}: {exc.msg}") from exc


def validate_config(doc: dict) -> None:
    try:
        jsonschema.validate(doc, load_schema())
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {path}: {exc.message}") from exc


def _shift_from_doc(doc: Optional[dict]) -> ShiftSpec:
    doc = doc or {}
    tilt = doc.get("prior_tilt")
    return ShiftSpec(
        rotation=doc.get("rotation", 0.0),
        noise_scale=doc.get("noise_scale", 0.0),
        spurious_flip=doc.get("spurious_flip", 0.0),
        prior_tilt=tuple(tilt) if tilt is not None else None,
        seed=doc.get("seed", 0),
    )


def _engine_config_from_doc(doc: dict) -> EngineConfig:
    doc = dict(doc)
    tpe_doc = doc.pop("tpe", None)
    config = EngineConfig(**doc)
    if tpe_doc:
        config.tpe = TpeConfig(**tpe_doc)
    return config


def _space_from_doc(doc: dict) -> SearchSpace:
    if doc["kind"] == "default":
        return default_autoft_space(doc["eta_star"])
    return SearchSpace.from_json(json.dumps(doc["params"]))


def _datasets_from_doc(doc: dict):
    """Return (pretrain, train, val_ood, val_id or None, tests dict)."""
    if "generator" in doc:
        shifts = doc.get("shifts", {})
        sizes_doc = doc.get("sizes", {})
        family = gen_spurious_blobs(
            n_classes=doc.get("n_classes", 3),
            dim=doc.get("dim", 8),
            spec_id=_shift_from_doc(shifts.get("id")),
            spec_val=_shift_from_doc(shifts.get("val", {"spurious_flip": 0.5, "seed": 2})),
            spec_tests={
                name: _shift_from_doc(s)
                for name, s in shifts.get(
                    "tests", {"id": {"seed": 3}, "ood": {"spurious_flip": 0.5, "seed": 4}}
                ).items()
            },
            sizes=SplitSizes(**sizes_doc),
            seed=doc.get("seed", 0),
            margin=doc.get("margin", 2.0),
            spurious_scale=doc.get("spurious_scale", 3.0),
            noise=doc.get("noise", 1.0),
            spec_pretrain=_shift_from_doc(shifts["pretrain"]) if "pretrain" in shifts else None,
        )
        return family.pretrain, family.train, family.val_ood, family.val_id, family.tests
    paths = doc["paths"]
    pretrain = load_dataset(paths["pretrain"])
    train = load_dataset(paths["train"])
    val = load_dataset(paths["val"])
    val_id = load_dataset(paths["val_id"]) if "val_id" in paths else None
    tests = {name: load_dataset(p) for name, p in paths.get("tests", {}).items()}
    return pretrain, train, val, val_id, tests


def _resolve_seed(doc: dict) -> dict:
    """Apply the AUTOFT_SEED override into engine.global_seed."""
    env = os.environ.get("AUTOFT_SEED")
    if env is None:
        return doc
    try:
        seed = int(env)
    except ValueError:
        raise ConfigError(f"AUTOFT_SEED must be an integer, got {env!r}") from None
    if seed < 0:
        raise ConfigError("AUTOFT_SEED must be nonnegative")
    doc = json.loads(json.dumps(doc))
    doc.setdefault("engine", {})["global_seed"] = seed
    return doc


class _RunLock:
    """Exclusive lock file guarding a run directory against concurrent writers."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / LOCK_NAME
        self._fd = None

    def __enter__(self):
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"run directory is locked by another writer: {self.path}") from None
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self._fd is not None:
            os.close(self._fd)
            self.path.unlink(missing_ok=True)
        return False


def cmd_run(args) -> int:
    config_path = Path(args.config)
    try:
        text = config_path.read_text(encoding="utf-8")
    except OSError as exc:
        _err(f"cannot read config: {exc}")
        return EXIT_CONFIG
    try:
        doc = _parse_config_text(text)
        validate_config(doc)
        doc = _resolve_seed(doc)
        space = _space_from_doc(doc["space"])
        pretrain_doc = doc["pretrain"]
        d_pre, d_tr, d_val, d_val_id, tests = _datasets_from_doc(doc["data"])
        config = _engine_config_from_doc(doc.get("engine", {}))
    except (ConfigError, DomainError, DatasetFormatError, FileNotFoundError, TypeError) as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG

    out_dir = Path(doc["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        with _RunLock(out_dir):
            writer = RunWriter(out_dir)
            resolved = dict(doc)
            resolved["engine"] = config.to_dict()
            resolved["resolved_space"] = json.loads(space.to_json())
            writer.write_config(resolved)
            _err(f"pretraining on {d_pre.n} rows ...")
            model0 = pretrain_linear(
                d_pre,
                eta_star=pretrain_doc["eta_star"],
                steps=pretrain_doc["steps"],
                seed=pretrain_doc.get("seed", 0),
                batch_size=pretrain_doc.get("batch_size", 64),
            )
            _err(f"running {config.trials} trials with sampler {config.sampler!r} ...")
            try:
                result = autoft_run(
                    model0, d_tr, d_val, space, config,
                    d_val_id=d_val_id,
                    on_trial=writer.append_trial,
                )
            except StudyFailure as exc:
                writer.close()
                _err(f"study failed: {exc} ({len(exc.history)} trials)")
                return EXIT_STUDY
            writer.write_best(result.best, result.best_objective, result.best_trial_id)
            writer.write_final_model(result.final_model)
            writer.write_budget(result.budget)
            writer.close()
            metric_fn = METRICS[config.metric]
            metrics = {name: float(metric_fn(result.final_model, ds)) for name, ds in sorted(tests.items())}
            payload = {
                "best": result.best.to_assignment(),
                "objective": result.best_objective,
                "metrics": metrics,
                "out_dir": str(out_dir),
            }
            print(json.dumps(payload, sort_keys=True))
            _err(f"done; artifacts in {out_dir}")
            return EXIT_OK
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def cmd_toy(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = didactic_run(d=args.dim, steps=args.steps, trials=args.trials, seed=args.seed)
    curves_path = out_dir / "toy_curves.csv"
    with open(curves_path, "w", encoding="utf-8") as fh:
        fh.write("arm,step,id_nll,ood_nll\n")
        for name in DIDACTIC_ARMS:
            arm = result.arms[name]
            for step, (id_nll, ood_nll) in enumerate(zip(arm.id_nll, arm.ood_nll)):
                fh.write(f"{name},{step},{_fmt(id_nll)},{_fmt(ood_nll)}\n")
    weights_path = out_dir / "toy_weights.csv"
    with open(weights_path, "w", encoding="utf-8") as fh:
        fh.write("dim," + ",".join(DIDACTIC_ARMS) + "\n")
        for i in range(result.d):
            cells = [str(i)] + [_fmt(result.arms[name].weights[i]) for name in DIDACTIC_ARMS]
            fh.write(",".join(cells) + "\n")
    for name in DIDACTIC_ARMS:
        arm = result.arms[name]
        _err(f"{name}: final ID NLL {arm.final_id_nll:.4f}, OOD NLL {arm.final_ood_nll:.4f}")
    _err(f"wrote {curves_path} and {weights_path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    samplers = [s.strip() for s in args.samplers.split(",") if s.strip()]
    unknown = [s for s in samplers if s not in SAMPLER_KINDS]
    if unknown or not samplers:
        _err(f"unknown sampler name(s): {unknown or 'none given'}; choose from {list(SAMPLER_KINDS)}")
        return EXIT_CONFIG
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    setup = default_blob_benchmark(seed=args.seed)
    _err(f"comparing {samplers} at budget {args.budget} x {args.repeats} repeats ...")
    result = compare_samplers(setup, samplers, budget=args.budget, repeats=args.repeats, base_seed=args.seed)
    data_path = out_dir / "compare_data.csv"
    with open(data_path, "w", encoding="utf-8") as fh:
        fh.write("sampler,repeat,id,ood\n")
        for row in result.rows:
            fh.write(f"{row.sampler},{row.repeat},{_fmt(row.id_score)},{_fmt(row.ood_score)}\n")
    summary_path = out_dir / "compare_summary.csv"
    with open(summary_path, "w", encoding="utf-8") as fh:
        fh.write("sampler,id_median,id_iqr,ood_median,ood_iqr\n")
        for sampler in samplers:
            s = result.summary[sampler]
            fh.write(
                f"{sampler},{_fmt(s['id_median'])},{_fmt(s['id_iqr'])},"
                f"{_fmt(s['ood_median'])},{_fmt(s['ood_iqr'])}\n"
            )
    for sampler in samplers:
        s = result.summary[sampler]
        _err(f"{sampler}: median ID {s['id_median']:.4f}, median OOD {s['ood_median']:.4f}")
    _err(f"wrote {data_path} and {summary_path}")
    return EXIT_OK


def _read_trials_tolerant(path: Path):
    records = []
    warning = None
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(TrialRecord.from_json(line))
        except (json.JSONDecodeError, KeyError, DomainError) as exc:
            warning = f"trials.jsonl: stopping at corrupt line {lineno} ({exc}); using the intact prefix"
            break
    return records, warning


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    trials_path = run_dir / "trials.jsonl"
    if not trials_path.exists():
        _err(f"missing {trials_path}")
        return EXIT_CONFIG
    records, warning = _read_trials_tolerant(trials_path)
    if warning:
        _err(f"warning: {warning}")
    trajectory = []
    best = None
    for r in records:
        if r.status == "completed" and (best is None or r.objective > best):
            best = r.objective
        trajectory.append([r.trial_id, best])
    completed = [r for r in records if r.status == "completed"]
    top10 = sorted(completed, key=lambda r: (-r.objective, r.trial_id))[:10]
    doc = {
        "n_trials": len(records),
        "n_completed": len(completed),
        "best_so_far": trajectory,
        "top_trials": [json.loads(r.to_json()) for r in top10],
        "curve": None,
        "chosen_alpha": None,
    }
    final_path = run_dir / "final_model.json"
    config_path = run_dir / "config.json"
    if final_path.exists() and config_path.exists():
        try:
            model = LinearModel.from_json(final_path.read_text())
            config_doc = json.loads(config_path.read_text())
            _, _, _, d_val_id, tests = _datasets_from_doc(config_doc["data"])
            if d_val_id is not None and tests:
                curve, chosen = ensemble_sweep(model.init, model.params, d_val_id, tests)
                doc["curve"] = [
                    {"alpha": p.alpha, "id": p.id_score, **p.ood_scores} for p in curve
                ]
                doc["chosen_alpha"] = chosen
        except (DomainError, DatasetFormatError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
            _err(f"warning: skipping ensemble curve ({exc})")
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autoft", description="Learn a fine-tuning objective by bi-level search.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a study from a JSON config")
    p_run.add_argument("--config", required=True, help="path to the run configuration JSON")
    p_run.set_defaults(fn=cmd_run)

    p_toy = sub.add_parser("toy", help="density-fitting study with per-dimension weights")
    p_toy.add_argument("--dim", type=int, default=10)
    p_toy.add_argument("--trials", type=int, default=300)
    p_toy.add_argument("--steps", type=int, default=300)
    p_toy.add_argument("--seed", type=int, default=0)
    p_toy.add_argument("--out", required=True, help="output directory for the CSV files")
    p_toy.set_defaults(fn=cmd_toy)

    p_cmp = sub.add_parser("compare", help="compare outer-loop samplers on the blob benchmark")
    p_cmp.add_argument("--budget", type=int, default=100)
    p_cmp.add_argument("--repeats", type=int, default=10)
    p_cmp.add_argument("--samplers", default=",".join(SAMPLER_KINDS))
    p_cmp.add_argument("--seed", type=int, default=0)
    p_cmp.add_argument("--out", required=True)
    p_cmp.set_defaults(fn=cmd_compare)

    p_rep = sub.add_parser("report", help="summarize a run directory (read-only)")
    p_rep.add_argument("--run", required=True, help="run directory created by `autoft run`")
    p_rep.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
