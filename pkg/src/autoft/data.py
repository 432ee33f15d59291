"""Synthetic datasets and distribution-shift generators, plus dataset file I/O.

Two generators: a diagonal-Gaussian family whose train and validation splits
compress different coordinates (for the density-fitting study), and a blob
classification family with core class signal plus spurious dimensions that are
perfectly label-correlated in training and decorrelated per split elsewhere.

Files are UTF-8 JSON Lines: one header record {name, d, C, groups} followed by
one row record {x, y, g?} per example; floats carry 17 significant digits so
round-trips are bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import DatasetFormatError, DomainError


@dataclass
class LabeledDataset:
    """Feature matrix with integer labels and optional group tags."""

    features: np.ndarray
    labels: np.ndarray
    groups: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DomainError("features must be a 2-D matrix")
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise DomainError("labels must match the number of rows")
        if self.labels.size and self.labels.min() < 0:
            raise DomainError("labels must be nonnegative")
        if self.groups is not None:
            self.groups = np.ascontiguousarray(self.groups, dtype=np.int64)
            if self.groups.shape != (n,):
                raise DomainError("groups must match the number of rows")
            if self.groups.size and self.groups.min() < 0:
                raise DomainError("group tags must be nonnegative")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def __len__(self) -> int:
        return self.n

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def subset(self, idx: np.ndarray, name: Optional[str] = None) -> "LabeledDataset":
        return LabeledDataset(
            self.features[idx],
            self.labels[idx],
            None if self.groups is None else self.groups[idx],
            self.name if name is None else name,
        )

    def take(self, n: int) -> "LabeledDataset":
        """First-n deterministic subset (rows are already shuffled at generation)."""
        if n >= self.n:
            return self
        return self.subset(np.arange(n))


@dataclass(frozen=True)
class ShiftSpec:
    """Knobs of one distribution shift; deterministic given its seed."""

    rotation: float = 0.0
    noise_scale: float = 0.0
    spurious_flip: float = 0.0
    prior_tilt: Optional[Tuple[float, ...]] = None
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.spurious_flip <= 1.0):
            raise DomainError(f"spurious_flip must lie in [0, 1], got {self.spurious_flip}")
        if self.noise_scale < 0.0:
            raise DomainError("noise_scale must be nonnegative")


def toy_variances(d: int) -> Tuple[np.ndarray, np.ndarray]:
    """Train and validation variance patterns of the Gaussian toy family.

    Train compresses dimensions 0-3 to 1e-3; validation compresses 0-2 and 4,
    leaving dimension 3 at unit variance. All other dimensions are 1.0.
    """
    if d < 6:
        raise DomainError(f"toy family needs d >= 6, got {d}")
    train = np.ones(d)
    train[:4] = 1e-3
    val = np.ones(d)
    val[[0, 1, 2, 4]] = 1e-3
    return train, val


def _toy_distinct_variances(d: int) -> np.ndarray:
    # a third shift for the validation-choice ablation: alternating compression
    var = np.ones(d)
    var[0::2] = 1e-3
    return var


def gen_gaussian_toy(
    d: int,
    n_tr: int = 500,
    n_val: int = 100,
    n_test: int = 1000,
    seed: int = 0,
    distinct_test_shift: bool = False,
) -> Tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Zero-mean diagonal Gaussian splits with mismatched variance patterns.

    The test split is a fresh draw from the validation distribution (that is
    the out-of-distribution target); ``distinct_test_shift`` swaps in a third
    pattern instead. Labels are all zero, groups absent.
    """
    train_var, val_var = toy_variances(d)
    test_var = _toy_distinct_variances(d) if distinct_test_shift else val_var

    def draw(var: np.ndarray, n: int, stream: int, name: str) -> LabeledDataset:
        rng = np.random.default_rng(np.random.SeedSequence([seed, stream]))
        X = rng.normal(0.0, 1.0, size=(n, d)) * np.sqrt(var)
        return LabeledDataset(X, np.zeros(n, dtype=np.int64), name=name)

    return (
        draw(train_var, n_tr, 1, "toy-train"),
        draw(val_var, n_val, 2, "toy-val"),
        draw(test_var, n_test, 3, "toy-test"),
    )


@dataclass(frozen=True)
class SplitSizes:
    pretrain: int = 2000
    train: int = 500
    val: int = 200
    test: int = 1000


@dataclass
class BlobFamily:
    """One generated benchmark family: all splits plus the generator metadata."""

    pretrain: LabeledDataset
    train: LabeledDataset
    val_id: LabeledDataset
    val_ood: LabeledDataset
    tests: Dict[str, LabeledDataset]
    n_classes: int
    dim: int


def _rotation_in_plane(d: int, angle: float) -> Optional[np.ndarray]:
    if angle == 0.0 or d < 2:
        return None
    R = np.eye(d)
    c, s = math.cos(angle), math.sin(angle)
    R[0, 0] = c
    R[0, 1] = -s
    R[1, 0] = s
    R[1, 1] = c
    return R


def _blob_split(
    name: str,
    n: int,
    spec: ShiftSpec,
    rng: np.random.Generator,
    core_means: np.ndarray,
    spur_patterns: np.ndarray,
    margin: float,
    spurious_scale: float,
    noise: float,
) -> LabeledDataset:
    C, d_core = core_means.shape
    d_spur = spur_patterns.shape[1]
    d = d_core + d_spur
    if spec.prior_tilt is not None:
        tilt = np.asarray(spec.prior_tilt, dtype=np.float64)
        if tilt.shape != (C,):
            raise DomainError(f"prior_tilt must have length {C}")
        probs = np.exp(tilt - tilt.max())
        probs /= probs.sum()
    else:
        probs = np.full(C, 1.0 / C)
    y = rng.choice(C, size=n, p=probs)
    X = np.empty((n, d))
    X[:, :d_core] = margin * core_means[y] + noise * rng.standard_normal((n, d_core))
    # spurious block: pattern of the true class unless flipped to a random class
    pattern_class = y.copy()
    flip = rng.random(n) < spec.spurious_flip
    pattern_class[flip] = rng.integers(0, C, size=int(flip.sum()))
    X[:, d_core:] = (
        spurious_scale * spur_patterns[pattern_class] + noise * rng.standard_normal((n, d_spur))
    )
    R = _rotation_in_plane(d, spec.rotation)
    if R is not None:
        X = X @ R.T
    if spec.noise_scale > 0.0:
        X = X + spec.noise_scale * rng.standard_normal((n, d))
    groups = (pattern_class != y).astype(np.int64)
    return LabeledDataset(X, y, groups, name=name)


def gen_spurious_blobs(
    n_classes: int,
    dim: int,
    spec_id: ShiftSpec,
    spec_val: ShiftSpec,
    spec_tests: Dict[str, ShiftSpec],
    sizes: SplitSizes = SplitSizes(),
    seed: int = 0,
    margin: float = 2.0,
    spurious_scale: float = 3.0,
    noise: float = 1.0,
    spec_pretrain: Optional[ShiftSpec] = None,
) -> BlobFamily:
    """Class blobs with a spurious shortcut that holds in training only.

    Core dimensions (one per class) carry stable class signal across every
    split. The remaining dimensions carry a per-class spurious pattern that is
    perfectly label-correlated wherever ``spurious_flip`` is 0 and decorrelated
    with probability ``spurious_flip`` elsewhere. Group tag 0 marks samples
    whose spurious pattern matches the label, 1 the flipped ones. The pretrain
    split defaults to fully decorrelated spurious dimensions, standing in for a
    broadly trained model's data.
    """
    if n_classes < 2:
        raise DomainError("need at least 2 classes")
    if dim < n_classes + 2:
        raise DomainError(f"need dim >= n_classes + 2, got dim={dim}, C={n_classes}")
    d_core = n_classes
    d_spur = dim - d_core
    family_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    core_means = np.eye(n_classes, d_core)
    spur_patterns = family_rng.standard_normal((n_classes, d_spur))
    spur_patterns /= np.linalg.norm(spur_patterns, axis=1, keepdims=True)
    if spec_pretrain is None:
        spec_pretrain = ShiftSpec(spurious_flip=1.0, seed=spec_id.seed)

    def stream(i: int, spec: ShiftSpec) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([seed, i, spec.seed]))

    common = dict(
        core_means=core_means,
        spur_patterns=spur_patterns,
        margin=margin,
        spurious_scale=spurious_scale,
        noise=noise,
    )
    tests = {
        tname: _blob_split(f"test-{tname}", sizes.test, tspec, stream(10 + i, tspec), **common)
        for i, (tname, tspec) in enumerate(sorted(spec_tests.items()))
    }
    return BlobFamily(
        pretrain=_blob_split("pretrain", sizes.pretrain, spec_pretrain, stream(1, spec_pretrain), **common),
        train=_blob_split("train", sizes.train, spec_id, stream(2, spec_id), **common),
        val_id=_blob_split("val-id", sizes.val, spec_id, stream(3, spec_id), **common),
        val_ood=_blob_split("val-ood", sizes.val, spec_val, stream(4, spec_val), **common),
        tests=tests,
        n_classes=n_classes,
        dim=dim,
    )


def split_dataset(ds: LabeledDataset, frac: float, seed: int) -> Tuple[LabeledDataset, LabeledDataset]:
    """Deterministic shuffle split; returns (first part of size ~(1-frac), rest)."""
    if not (0.0 < frac < 1.0):
        raise DomainError("frac must lie in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5350]))
    perm = rng.permutation(ds.n)
    cut = ds.n - int(round(frac * ds.n))
    if cut < 1 or cut >= ds.n:
        raise DomainError("split leaves an empty side")
    return ds.subset(perm[:cut], name=f"{ds.name}-a"), ds.subset(perm[cut:], name=f"{ds.name}-b")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_dataset(ds: LabeledDataset, path) -> None:
    """Write the JSON Lines format: header first, then one record per row."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "name": ds.name,
            "d": ds.dim,
            "C": ds.num_classes,
            "groups": ds.groups is not None,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i in range(ds.n):
            xs = ",".join(_fmt(v) for v in ds.features[i])
            row = f'{{"x":[{xs}],"y":{int(ds.labels[i])}'
            if ds.groups is not None:
                row += f',"g":{int(ds.groups[i])}'
            fh.write(row + "}\n")


def load_dataset(path) -> LabeledDataset:
    """Read the on-disk format back; bitwise-lossless on features."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: line 1: empty file")
    try:
        header = json.loads(lines[0])
        name, d, has_groups = header["name"], header["d"], header["groups"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"{path}: line 1: bad header ({exc})") from exc
    feats, labels, groups = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            row = json.loads(line)
            x = row["x"]
            if len(x) != d:
                raise DatasetFormatError(f"{path}: line {lineno}: expected {d} features")
            feats.append(x)
            labels.append(row["y"])
            if has_groups:
                groups.append(row["g"])
        except DatasetFormatError:
            raise
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from exc
    features = np.array(feats, dtype=np.float64).reshape(len(feats), d)
    return LabeledDataset(
        features,
        np.array(labels, dtype=np.int64),
        np.array(groups, dtype=np.int64) if has_groups else None,
        name=name,
    )
