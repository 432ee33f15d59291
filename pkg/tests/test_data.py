"""Generators and dataset file I/O."""

import numpy as np
import pytest

from autoft.data import (
    LabeledDataset,
    ShiftSpec,
    SplitSizes,
    gen_gaussian_toy,
    gen_spurious_blobs,
    load_dataset,
    save_dataset,
    split_dataset,
    toy_variances,
)
from autoft.errors import DatasetFormatError, DomainError
from autoft.models import pretrain_linear


class TestGaussianToy:
    def test_train_compressed_dimensions(self):
        train, _, _ = gen_gaussian_toy(10, n_tr=10_000, seed=0)
        var = train.features.var(axis=0)
        assert np.all(var[:4] < 0.01)
        assert np.all(var[4:] > 0.5)

    def test_val_pattern_restores_dimension_three(self):
        _, val, _ = gen_gaussian_toy(10, n_val=10_000, seed=0)
        var = val.features.var(axis=0)
        assert abs(var[3] - 1.0) < 0.15
        assert var[4] < 0.01

    def test_test_split_draws_from_val_distribution(self):
        _, val, test = gen_gaussian_toy(10, n_val=10_000, n_test=10_000, seed=1)
        np.testing.assert_allclose(
            test.features.var(axis=0) > 0.5, val.features.var(axis=0) > 0.5
        )

    def test_same_seed_bit_identical(self):
        a = gen_gaussian_toy(8, seed=7)
        b = gen_gaussian_toy(8, seed=7)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.features, y.features)

    def test_minimum_dimension(self):
        with pytest.raises(DomainError):
            gen_gaussian_toy(5)

    def test_variance_pattern_helper(self):
        train, val = toy_variances(10)
        assert train.tolist() == [1e-3] * 4 + [1.0] * 6
        assert val.tolist() == [1e-3, 1e-3, 1e-3, 1.0, 1e-3, 1.0, 1.0, 1.0, 1.0, 1.0]

    def test_distinct_test_shift_differs(self):
        _, val, test = gen_gaussian_toy(10, n_test=10_000, seed=2, distinct_test_shift=True)
        assert not np.array_equal(test.features.var(axis=0) < 0.01, val.features.var(axis=0) < 0.01)


def _family(flip_test=0.5, margin=3.0, seed=0, **kwargs):
    return gen_spurious_blobs(
        n_classes=3,
        dim=8,
        spec_id=ShiftSpec(seed=1),
        spec_val=ShiftSpec(spurious_flip=0.5, seed=2),
        spec_tests={"id": ShiftSpec(seed=3), "ood": ShiftSpec(spurious_flip=flip_test, seed=4)},
        sizes=SplitSizes(pretrain=1500, train=500, val=200, test=1500),
        seed=seed,
        margin=margin,
        **kwargs,
    )


class TestSpuriousBlobs:
    def test_consistent_shortcut_both_classifiers_reach_95(self):
        # with no flips anywhere, core-only and full classifiers both separate
        family = _family(flip_test=0.0, margin=3.0)
        test = family.tests["ood"]
        full = pretrain_linear(family.train, eta_star=0.05, steps=300, seed=0)
        assert (full.logits(test.features).argmax(axis=1) == test.labels).mean() >= 0.95
        core_only = LabeledDataset(
            np.concatenate([family.train.features[:, :3], np.zeros((family.train.n, 5))], axis=1),
            family.train.labels,
        )
        core_model = pretrain_linear(core_only, eta_star=0.05, steps=300, seed=0)
        masked_test = np.concatenate([test.features[:, :3], np.zeros((test.n, 5))], axis=1)
        preds = core_model.logits(masked_test).argmax(axis=1)
        assert (preds == test.labels).mean() >= 0.95

    def test_spurious_reliance_hurts_under_flip(self):
        # directional: a model fit on the correlated split scores lower on the
        # flipped test than one fit on decorrelated (pretraining) data
        family = _family(flip_test=0.5, margin=2.0)
        reliant = pretrain_linear(family.train, eta_star=0.05, steps=300, seed=0)
        robust = pretrain_linear(family.pretrain, eta_star=0.05, steps=300, seed=0)
        test = family.tests["ood"]
        acc_reliant = (reliant.logits(test.features).argmax(axis=1) == test.labels).mean()
        acc_robust = (robust.logits(test.features).argmax(axis=1) == test.labels).mean()
        assert acc_reliant < acc_robust

    def test_same_seed_identical_family(self):
        a = _family(seed=5)
        b = _family(seed=5)
        np.testing.assert_array_equal(a.train.features, b.train.features)
        np.testing.assert_array_equal(a.tests["ood"].features, b.tests["ood"].features)
        np.testing.assert_array_equal(a.val_ood.groups, b.val_ood.groups)

    def test_different_seeds_decorrelated(self):
        sizes = SplitSizes(pretrain=10, train=10_000, val=10, test=10)
        a = gen_spurious_blobs(3, 8, ShiftSpec(seed=1), ShiftSpec(seed=2), {"t": ShiftSpec(seed=3)}, sizes, seed=0)
        b = gen_spurious_blobs(3, 8, ShiftSpec(seed=1), ShiftSpec(seed=2), {"t": ShiftSpec(seed=3)}, sizes, seed=1)
        for dim in range(8):
            corr = np.corrcoef(a.train.features[:, dim], b.train.features[:, dim])[0, 1]
            assert abs(corr) < 0.05

    def test_groups_partition_and_match_flips(self):
        family = _family()
        val = family.val_ood
        assert val.groups is not None
        assert set(np.unique(val.groups)) <= {0, 1}
        # train split is perfectly correlated: every tag is 0
        assert np.all(family.train.groups == 0)
        # flipped fraction tracks the spec probability (flip to a uniform class)
        frac = val.groups.mean()
        assert abs(frac - 0.5 * (1 - 1 / 3)) < 0.1

    def test_prior_tilt_shifts_class_frequencies(self):
        tilted = gen_spurious_blobs(
            n_classes=3,
            dim=8,
            spec_id=ShiftSpec(prior_tilt=(2.0, 0.0, 0.0), seed=1),
            spec_val=ShiftSpec(seed=2),
            spec_tests={"ood": ShiftSpec(seed=3)},
            sizes=SplitSizes(pretrain=100, train=3000, val=100, test=100),
            seed=0,
        )
        counts = np.bincount(tilted.train.labels, minlength=3)
        assert counts[0] > counts[1] * 2

    def test_rotation_changes_features_deterministically(self):
        def build(rotation):
            return gen_spurious_blobs(
                n_classes=3,
                dim=8,
                spec_id=ShiftSpec(rotation=rotation, seed=1),
                spec_val=ShiftSpec(seed=2),
                spec_tests={"ood": ShiftSpec(seed=3)},
                sizes=SplitSizes(pretrain=1500, train=500, val=200, test=1500),
                seed=3,
            )

        plain = build(0.0)
        rotated = build(0.7)
        assert not np.array_equal(plain.train.features, rotated.train.features)
        # rotation is an isometry: norms are preserved
        np.testing.assert_allclose(
            np.linalg.norm(plain.train.features, axis=1),
            np.linalg.norm(rotated.train.features, axis=1),
            rtol=1e-9,
        )

    def test_dimension_preconditions(self):
        with pytest.raises(DomainError):
            gen_spurious_blobs(3, 4, ShiftSpec(), ShiftSpec(), {"t": ShiftSpec()})
        with pytest.raises(DomainError):
            gen_spurious_blobs(1, 8, ShiftSpec(), ShiftSpec(), {"t": ShiftSpec()})

    def test_shift_spec_validation(self):
        with pytest.raises(DomainError):
            ShiftSpec(spurious_flip=1.5)
        with pytest.raises(DomainError):
            ShiftSpec(noise_scale=-1.0)

    def test_default_val_size_honors_small_validation(self):
        assert SplitSizes().val <= 1000


class TestDatasetValidation:
    def test_row_count_agreement(self):
        with pytest.raises(DomainError):
            LabeledDataset(np.zeros((3, 2)), np.zeros(2, dtype=int))
        with pytest.raises(DomainError):
            LabeledDataset(np.zeros((3, 2)), np.zeros(3, dtype=int), np.zeros(4, dtype=int))

    def test_num_classes_inferred(self):
        ds = LabeledDataset(np.zeros((4, 2)), np.array([0, 2, 1, 2]))
        assert ds.num_classes == 3

    def test_take_and_subset(self):
        ds = LabeledDataset(np.arange(12.0).reshape(6, 2), np.arange(6) % 2, np.arange(6) % 3)
        sub = ds.take(4)
        assert sub.n == 4
        np.testing.assert_array_equal(sub.features, ds.features[:4])


class TestSplitDataset:
    def test_partition_and_determinism(self):
        ds = LabeledDataset(np.random.default_rng(0).normal(size=(50, 3)), np.zeros(50, dtype=int))
        a1, b1 = split_dataset(ds, 0.2, seed=4)
        a2, b2 = split_dataset(ds, 0.2, seed=4)
        assert a1.n == 40 and b1.n == 10
        np.testing.assert_array_equal(a1.features, a2.features)
        np.testing.assert_array_equal(b1.features, b2.features)
        merged = np.vstack([a1.features, b1.features])
        assert sorted(map(tuple, merged)) == sorted(map(tuple, ds.features))


class TestFileIO:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(14)
        ds = LabeledDataset(
            rng.normal(size=(20, 5)) * 1e-7,
            rng.integers(0, 4, 20),
            rng.integers(0, 2, 20),
            name="round",
        )
        path = tmp_path / "ds.jsonl"
        save_dataset(ds, path)
        back = load_dataset(path)
        np.testing.assert_array_equal(back.features, ds.features)
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_array_equal(back.groups, ds.groups)
        assert back.name == "round"

    def test_round_trip_without_groups(self, tmp_path):
        ds = LabeledDataset(np.eye(3), np.arange(3))
        path = tmp_path / "plain.jsonl"
        save_dataset(ds, path)
        assert load_dataset(path).groups is None

    def test_missing_file_names_path(self, tmp_path):
        missing = tmp_path / "nope.jsonl"
        with pytest.raises(FileNotFoundError, match="nope.jsonl"):
            load_dataset(missing)

    def test_truncated_file_names_line(self, tmp_path):
        ds = LabeledDataset(np.eye(3), np.arange(3))
        path = tmp_path / "trunc.jsonl"
        save_dataset(ds, path)
        text = path.read_text().splitlines()
        text[2] = text[2][: len(text[2]) // 2]  # corrupt the middle row
        path.write_text("\n".join(text) + "\n")
        with pytest.raises(DatasetFormatError, match="line 3"):
            load_dataset(path)

    def test_bad_header_names_line_one(self, tmp_path):
        path = tmp_path / "hdr.jsonl"
        path.write_text('{"not_a_header": 1}\n')
        with pytest.raises(DatasetFormatError, match="line 1"):
            load_dataset(path)
