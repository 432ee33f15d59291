"""Loss terms against naive loop oracles, finite differences, and exact limits."""

import math

import numpy as np
import pytest

from autoft.errors import DomainError, NumericalError
from autoft.losses import (
    DEFAULT_TAU,
    LossWeights,
    composite_grad,
    composite_loss,
    confidence_min_term,
    contrastive_term,
    cross_entropy_term,
    entropy_term,
    hinge_term,
    l1_init_term,
    l1_norm_term,
    l2_init_term,
    l2_norm_term,
)
from autoft.models import LinearForward, ParamLayout, ParamVector


def _setup(C, d, rng, kink_gap=0.02):
    """Random model/init pair kept away from L1 and hinge kinks."""
    layout = ParamLayout.linear(C, d)
    theta = rng.normal(size=layout.size)
    theta = np.sign(theta) * (np.abs(theta) + kink_gap)
    shift = rng.normal(size=layout.size)
    theta0 = theta - np.sign(shift) * (np.abs(shift) + kink_gap)
    return ParamVector(theta, layout), ParamVector(theta0, layout), LinearForward(C, d)


def _params_for_logits(S):
    """A model over identity features whose logits on X=I are exactly S."""
    C = S.shape[1]
    d = S.shape[0]
    layout = ParamLayout.linear(C, d)
    values = np.concatenate([np.asarray(S, dtype=float).T.ravel(), np.zeros(C)])
    X = np.eye(d)
    return ParamVector(values, layout), X, LinearForward(C, d)


class TestCrossEntropy:
    def test_uniform_logits_give_log_c(self):
        S = np.zeros((4, 10))
        params, X, fwd = _params_for_logits(S)
        y = np.array([0, 3, 5, 9])
        value, _ = cross_entropy_term(params, params, (X, y), fwd)
        assert value == pytest.approx(math.log(10), rel=1e-12)

    def test_confident_correct_limit(self):
        S = np.zeros((3, 5))
        y = np.array([1, 2, 0])
        S[np.arange(3), y] = 50.0
        params, X, fwd = _params_for_logits(S)
        value, _ = cross_entropy_term(params, params, (X, y), fwd)
        assert value < 1e-20

    def test_matches_per_sample_loop_oracle(self):
        rng = np.random.default_rng(0)
        params, init, fwd = _setup(3, 4, rng)
        X = rng.normal(size=(5, 4))
        y = rng.integers(0, 3, 5)
        value, _ = cross_entropy_term(params, init, (X, y), fwd)
        expected = 0.0
        for i in range(5):
            s = fwd.logits(params.values, X[i : i + 1])[0]
            expected += -(s[y[i]] - math.log(sum(math.exp(v) for v in s)))
        assert value == pytest.approx(expected / 5, rel=1e-12)


class TestHinge:
    def test_satisfied_margin_is_zero(self):
        S = np.array([[2.0, 0.5, 0.9], [0.0, 3.0, 1.9]])
        y = np.array([0, 1])
        params, X, fwd = _params_for_logits(S)
        value, grad = hinge_term(params, params, (X, y), fwd)
        assert value == 0.0
        assert np.all(grad == 0.0)

    def test_equal_logits_give_one(self):
        S = np.ones((3, 4))
        params, X, fwd = _params_for_logits(S)
        value, _ = hinge_term(params, params, (X, np.array([0, 1, 2])), fwd)
        assert value == pytest.approx(1.0, rel=1e-12)

    def test_mixed_batch_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        S = rng.normal(size=(8, 5)) * 2
        y = rng.integers(0, 5, 8)
        params, X, fwd = _params_for_logits(S)
        value, _ = hinge_term(params, params, (X, y), fwd)
        expected = 0.0
        for i in range(8):
            rival = max(S[i, j] for j in range(5) if j != y[i])
            expected += max(0.0, 1.0 + rival - S[i, y[i]])
        assert value == pytest.approx(expected / 8, rel=1e-12)

    def test_single_class_rejected(self):
        rng = np.random.default_rng(2)
        layout = ParamLayout.linear(1, 3)
        params = ParamVector(rng.normal(size=layout.size), layout)
        with pytest.raises(DomainError):
            hinge_term(params, params, (rng.normal(size=(2, 3)), np.zeros(2, dtype=int)), LinearForward(1, 3))


def _contrastive_oracle(X, y, M, tau):
    """Independent double-loop implementation of the symmetric objective."""
    n, C = X.shape[0], M.shape[0]
    Xh = X / np.linalg.norm(X, axis=1, keepdims=True)
    Mh = M / np.linalg.norm(M, axis=1, keepdims=True)
    T = np.array([[Xh[i] @ Mh[c] / tau for c in range(C)] for i in range(n)])
    loss_sc = 0.0
    for i in range(n):
        loss_sc += -(T[i, y[i]] - math.log(sum(math.exp(v) for v in T[i])))
    loss_sc /= n
    present = sorted(set(int(v) for v in y))
    loss_cs = 0.0
    for c in present:
        members = [i for i in range(n) if y[i] == c]
        lse = math.log(sum(math.exp(T[i, c]) for i in range(n)))
        loss_cs += sum(-(T[i, c] - lse) for i in members) / len(members)
    loss_cs /= len(present)
    return 0.5 * (loss_sc + loss_cs)


class TestContrastive:
    def test_perfect_alignment_low_temperature(self):
        # one sample per class, features equal to the prototypes
        rng = np.random.default_rng(3)
        C, d = 4, 6
        M = rng.normal(size=(C, d))
        layout = ParamLayout.linear(C, d)
        params = ParamVector(np.concatenate([M.ravel(), np.zeros(C)]), layout)
        X = M.copy()
        y = np.arange(C)
        value, _ = contrastive_term(params, params, (X, y), LinearForward(C, d), tau=0.01)
        assert value < 1e-3

    def test_orthonormal_zero_alignment_gives_log_c(self):
        C, d = 4, 8
        M = np.eye(C, d)
        X = np.zeros((4, d))
        X[:, 4:] = np.eye(4)  # orthogonal to every prototype
        y = np.arange(4)
        layout = ParamLayout.linear(C, d)
        params = ParamVector(np.concatenate([M.ravel(), np.zeros(C)]), layout)
        for tau in (0.05, 0.5, 2.0):
            value, _ = contrastive_term(params, params, (X, y), LinearForward(C, d), tau=tau)
            assert value == pytest.approx(math.log(4), rel=1e-12)

    def test_random_batch_matches_double_loop_oracle(self):
        rng = np.random.default_rng(4)
        params, init, fwd = _setup(4, 5, rng)
        X = rng.normal(size=(9, 5))
        y = rng.integers(0, 4, 9)
        value, _ = contrastive_term(params, init, (X, y), fwd)
        M = fwd.prototypes(params.values)
        assert value == pytest.approx(_contrastive_oracle(X, y, M, DEFAULT_TAU), abs=1e-10)

    def test_zero_norm_prototype_raises(self):
        layout = ParamLayout.linear(2, 3)
        params = ParamVector(np.zeros(layout.size), layout)
        with pytest.raises(NumericalError, match="contrastive"):
            contrastive_term(params, params, (np.ones((2, 3)), np.array([0, 1])), LinearForward(2, 3))


class TestEntropyAndConfidence:
    def test_uniform_entropy_is_log_c(self):
        params, X, fwd = _params_for_logits(np.zeros((3, 10)))
        value, _ = entropy_term(params, params, (X, np.zeros(3, dtype=int)), fwd)
        assert value == pytest.approx(math.log(10), rel=1e-12)

    def test_one_hot_entropy_is_zero(self):
        S = np.zeros((2, 4))
        S[:, 0] = 60.0
        params, X, fwd = _params_for_logits(S)
        value, _ = entropy_term(params, params, (X, np.zeros(2, dtype=int)), fwd)
        assert value < 1e-20

    def test_binary_symmetric_entropy(self):
        params, X, fwd = _params_for_logits(np.zeros((1, 2)))
        value, _ = entropy_term(params, params, (X, np.zeros(1, dtype=int)), fwd)
        assert value == pytest.approx(math.log(2), rel=1e-12)

    def test_confidence_one_hot_and_uniform(self):
        S = np.zeros((2, 10))
        S[:, 3] = 60.0
        params, X, fwd = _params_for_logits(S)
        value, _ = confidence_min_term(params, params, (X, np.zeros(2, dtype=int)), fwd)
        assert value == pytest.approx(1.0, abs=1e-15)
        params, X, fwd = _params_for_logits(np.zeros((2, 10)))
        value, _ = confidence_min_term(params, params, (X, np.zeros(2, dtype=int)), fwd)
        assert value == pytest.approx(0.1, rel=1e-12)

    def test_confidence_mixed_batch_loop_oracle(self):
        rng = np.random.default_rng(5)
        S = rng.normal(size=(7, 4))
        params, X, fwd = _params_for_logits(S)
        value, _ = confidence_min_term(params, params, (X, np.zeros(7, dtype=int)), fwd)
        expected = 0.0
        for i in range(7):
            exps = [math.exp(v - max(S[i])) for v in S[i]]
            expected += max(exps) / sum(exps)
        assert value == pytest.approx(expected / 7, rel=1e-12)

    def test_anti_monotone_on_binary_simplex(self):
        # as max-prob increases, entropy decreases and confidence increases
        gaps = np.linspace(0.0, 6.0, 25)
        ent, conf = [], []
        for gap in gaps:
            params, X, fwd = _params_for_logits(np.array([[gap, 0.0]]))
            y = np.zeros(1, dtype=int)
            ent.append(entropy_term(params, params, (X, y), fwd)[0])
            conf.append(confidence_min_term(params, params, (X, y), fwd)[0])
        assert np.all(np.diff(ent) < 0)
        assert np.all(np.diff(conf) > 0)


class TestParamTerms:
    def test_zero_params(self):
        layout = ParamLayout.linear(2, 2)
        params = ParamVector(np.zeros(layout.size), layout)
        batch = (np.ones((1, 2)), np.zeros(1, dtype=int))
        fwd = LinearForward(2, 2)
        assert l1_norm_term(params, params, batch, fwd)[0] == 0.0
        assert l2_norm_term(params, params, batch, fwd)[0] == 0.0

    def test_arithmetic_examples(self):
        layout = ParamLayout((("proto", (1, 1)), ("bias", (1,))))
        params = ParamVector(np.array([3.0, -4.0]), layout)
        zero = ParamVector(np.zeros(2), layout)
        batch = (np.ones((1, 1)), np.zeros(1, dtype=int))
        fwd = LinearForward(1, 1)
        assert l2_norm_term(params, zero, batch, fwd)[0] == pytest.approx(12.5)
        assert l1_norm_term(params, zero, batch, fwd)[0] == pytest.approx(3.5)

    def test_init_distance_identity_and_unit(self):
        layout = ParamLayout((("proto", (1, 1)), ("bias", (1,))))
        params = ParamVector(np.array([2.0, -1.0]), layout)
        batch = (np.ones((1, 1)), np.zeros(1, dtype=int))
        fwd = LinearForward(1, 1)
        assert l1_init_term(params, params, batch, fwd)[0] == 0.0
        assert l2_init_term(params, params, batch, fwd)[0] == 0.0
        shifted = ParamVector(params.values + 1.0, layout)
        assert l2_init_term(shifted, params, batch, fwd)[0] == pytest.approx(1.0)

    def test_random_instances_match_loop_oracle(self):
        rng = np.random.default_rng(6)
        params, init, fwd = _setup(3, 5, rng)
        batch = (rng.normal(size=(2, 5)), rng.integers(0, 3, 2))
        n = params.values.size
        l1 = sum(abs(v) for v in params.values) / n
        l2 = sum(v * v for v in params.values) / n
        l1i = sum(abs(a - b) for a, b in zip(params.values, init.values)) / n
        l2i = sum((a - b) ** 2 for a, b in zip(params.values, init.values)) / n
        assert l1_norm_term(params, init, batch, fwd)[0] == pytest.approx(l1, rel=1e-12)
        assert l2_norm_term(params, init, batch, fwd)[0] == pytest.approx(l2, rel=1e-12)
        assert l1_init_term(params, init, batch, fwd)[0] == pytest.approx(l1i, rel=1e-12)
        assert l2_init_term(params, init, batch, fwd)[0] == pytest.approx(l2i, rel=1e-12)


def _fd_gradient(fn, theta, layout, h=1e-5):
    fd = np.zeros_like(theta)
    for i in range(theta.size):
        tp = theta.copy()
        tp[i] += h
        tm = theta.copy()
        tm[i] -= h
        fd[i] = (fn(ParamVector(tp, layout)) - fn(ParamVector(tm, layout))) / (2 * h)
    return fd


def _max_rel_err(analytic, fd):
    denom = np.maximum.reduce([np.abs(analytic), np.abs(fd), np.full_like(fd, 1e-6)])
    return float(np.max(np.abs(analytic - fd) / denom))


ALL_TERMS = [
    cross_entropy_term,
    hinge_term,
    contrastive_term,
    entropy_term,
    confidence_min_term,
    l1_norm_term,
    l2_norm_term,
    l1_init_term,
    l2_init_term,
]


class TestGradients:
    @pytest.mark.parametrize("term", ALL_TERMS, ids=lambda f: f.__name__)
    def test_each_term_matches_finite_differences(self, term):
        rng = np.random.default_rng(hash(term.__name__) % 2**32)
        for rep in range(5):
            params, init, fwd = _setup(4, 6, rng)
            X = rng.normal(size=(8, 6))
            y = rng.integers(0, 4, 8)
            _, grad = term(params, init, (X, y), fwd)
            fd = _fd_gradient(
                lambda p: term(p, init, (X, y), fwd)[0], params.values, params.layout
            )
            assert _max_rel_err(grad, fd) <= 1e-4

    def test_composite_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        params, init, fwd = _setup(3, 5, rng)
        X = rng.normal(size=(6, 5))
        y = rng.integers(0, 3, 6)
        w = rng.uniform(0.05, 2.0, 9)
        _, grad = composite_grad(params, init, (X, y), w, fwd)
        fd = _fd_gradient(
            lambda p: composite_grad(p, init, (X, y), w, fwd)[0], params.values, params.layout
        )
        assert _max_rel_err(grad, fd) <= 1e-4


class TestComposite:
    def test_all_weights_zero(self):
        rng = np.random.default_rng(7)
        params, init, fwd = _setup(3, 4, rng)
        batch = (rng.normal(size=(4, 4)), rng.integers(0, 3, 4))
        out = composite_loss(params, init, batch, LossWeights(), fwd)
        assert out.total == 0.0
        assert np.all(out.gradient == 0.0)
        assert all(v is None for v in out.values.values())

    def test_single_term_reduction(self):
        rng = np.random.default_rng(8)
        params, init, fwd = _setup(3, 4, rng)
        batch = (rng.normal(size=(4, 4)), rng.integers(0, 3, 4))
        out = composite_loss(params, init, batch, LossWeights(w_ce=1.0), fwd)
        value, grad = cross_entropy_term(params, init, batch, fwd)
        assert out.total == value
        assert np.array_equal(out.gradient, grad)

    def test_total_is_weighted_sum_of_reported_values(self):
        rng = np.random.default_rng(9)
        params, init, fwd = _setup(4, 5, rng)
        batch = (rng.normal(size=(6, 5)), rng.integers(0, 4, 6))
        weights = LossWeights(*rng.uniform(0.0, 2.0, 9))
        out = composite_loss(params, init, batch, weights, fwd, compute_all=True)
        expected = sum(
            wv * out.values[name]
            for wv, name in zip(weights.as_array(), out.values)
        )
        assert out.total == pytest.approx(expected, rel=1e-10)

    def test_linearity_in_weights(self):
        rng = np.random.default_rng(10)
        params, init, fwd = _setup(3, 5, rng)
        batch = (rng.normal(size=(5, 5)), rng.integers(0, 3, 5))
        w = rng.uniform(0.1, 1.5, 9)
        base = composite_grad(params, init, batch, w, fwd)
        for alpha in (0.0, 0.5, 3.0):
            scaled = composite_grad(params, init, batch, alpha * w, fwd)
            assert scaled[0] == pytest.approx(alpha * base[0], rel=1e-10, abs=1e-15)
            np.testing.assert_allclose(scaled[1], alpha * base[1], rtol=1e-10, atol=1e-15)

    def test_additivity_in_weights(self):
        rng = np.random.default_rng(12)
        params, init, fwd = _setup(3, 5, rng)
        batch = (rng.normal(size=(5, 5)), rng.integers(0, 3, 5))
        w1 = rng.uniform(0.1, 1.5, 9)
        w2 = rng.uniform(0.1, 1.5, 9)
        t1, g1 = composite_grad(params, init, batch, w1, fwd)
        t2, g2 = composite_grad(params, init, batch, w2, fwd)
        t12, g12 = composite_grad(params, init, batch, w1 + w2, fwd)
        assert t12 == pytest.approx(t1 + t2, rel=1e-10)
        np.testing.assert_allclose(g12, g1 + g2, rtol=1e-10, atol=1e-14)

    def test_stable_at_large_logit_magnitudes(self):
        S = np.array([[1e4, -1e4, 0.0], [5e3, 5e3, -1e4]])
        params, X, fwd = _params_for_logits(S)
        y = np.array([0, 1])
        for term in (cross_entropy_term, entropy_term, confidence_min_term, hinge_term):
            value, grad = term(params, params, (X, y), fwd)
            assert np.isfinite(value)
            assert np.all(np.isfinite(grad))

    def test_empty_batch(self):
        rng = np.random.default_rng(13)
        params, init, fwd = _setup(2, 3, rng)
        with pytest.raises(DomainError, match="empty batch"):
            cross_entropy_term(params, init, (np.empty((0, 3)), np.empty(0, dtype=int)), fwd)

    def test_non_finite_names_the_term(self):
        layout = ParamLayout.linear(2, 2)
        bad = ParamVector(np.array([np.inf, 0.0, 0.0, 0.0, 0.0, 0.0]), layout)
        batch = (np.ones((1, 2)), np.zeros(1, dtype=int))
        with pytest.raises(NumericalError, match="l2_norm"):
            l2_norm_term(bad, bad, batch, LinearForward(2, 2))

    def test_weights_validation(self):
        with pytest.raises(DomainError):
            LossWeights(w_ce=-1.0)
        with pytest.raises(DomainError):
            LossWeights(w_hinge=float("nan"))

    def test_weights_json_round_trip_and_normalization(self):
        w = LossWeights(w_ce=2.0, w_l2init=4.0)
        assert LossWeights.from_json(w.to_json()) == w
        normalized = LossWeights.from_json(w.to_json(normalize=True))
        assert normalized.w_ce == 1.0
        assert normalized.w_l2init == 2.0
