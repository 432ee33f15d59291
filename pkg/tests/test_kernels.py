"""Backend parity: compiled core vs numpy fallback vs the public reference ops."""

import numpy as np
import pytest

from autoft import _kernels
from autoft._kernels import _fallback
from autoft.losses import composite_grad
from autoft.models import LinearForward, OptState, ParamLayout, ParamVector, adamw_step

try:
    from autoft._kernels import _core
except ImportError:
    _core = None


def _instance(seed, C=4, d=6, n=60, B=16, K=25):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = rng.integers(0, C, n)
    theta = rng.normal(size=C * d + C)
    theta0 = rng.normal(size=C * d + C)
    w = rng.uniform(0.0, 2.0, 9)
    batch_idx = rng.integers(0, n, size=(K, B), dtype=np.int64)
    return X, y, theta, theta0, w, batch_idx, C, K


def _run(impl, X, y, theta, theta0, w, batch_idx, C, K, eta=0.05, delta=0.3, t0=0):
    t = theta.copy()
    m = np.zeros_like(t)
    v = np.zeros_like(t)
    status = impl.finetune_linear(t, theta0, X, y, w, eta, delta, 0.1, batch_idx, t0, K, m, v, C)
    return status, t, m, v


def test_backend_name_is_known():
    assert _kernels.backend_name() in ("compiled", "python")


def test_fallback_equals_public_op_composition():
    X, y, theta, theta0, w, batch_idx, C, K = _instance(0)
    status, t_fast, _, _ = _run(_fallback, X, y, theta, theta0, w, batch_idx, C, K)
    assert status == 0

    d = X.shape[1]
    layout = ParamLayout.linear(C, d)
    params = ParamVector(theta.copy(), layout)
    init = ParamVector(theta0, layout)
    fwd = LinearForward(C, d)
    opt = OptState.fresh(layout.size, 0.05, 0.3, K)
    for k in range(K):
        idx = batch_idx[k]
        _, grad = composite_grad(params, init, (X[idx], y[idx]), w, fwd)
        params, opt = adamw_step(opt, params, grad)
    np.testing.assert_array_equal(t_fast, params.values)


@pytest.mark.skipif(_core is None, reason="compiled extension not built")
class TestCompiledParity:
    @pytest.mark.parametrize("seed", range(8))
    def test_matches_fallback(self, seed):
        X, y, theta, theta0, w, batch_idx, C, K = _instance(seed)
        s1, t1, m1, v1 = _run(_core, X, y, theta, theta0, w, batch_idx, C, K)
        s2, t2, m2, v2 = _run(_fallback, X, y, theta, theta0, w, batch_idx, C, K)
        assert s1 == s2 == 0
        np.testing.assert_allclose(t1, t2, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(m1, m2, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(v1, v2, rtol=1e-9, atol=1e-14)

    def test_single_active_term_variants(self):
        # exercise each term's kernel path in isolation
        X, y, theta, theta0, _, batch_idx, C, K = _instance(99)
        for term_index in range(9):
            w = np.zeros(9)
            w[term_index] = 1.3
            s1, t1, _, _ = _run(_core, X, y, theta, theta0, w, batch_idx, C, K)
            s2, t2, _, _ = _run(_fallback, X, y, theta, theta0, w, batch_idx, C, K)
            assert s1 == s2 == 0
            np.testing.assert_allclose(t1, t2, rtol=1e-9, atol=1e-12)

    def test_chunked_equals_single_call(self):
        X, y, theta, theta0, w, batch_idx, C, K = _instance(3)
        _, t_single, _, _ = _run(_core, X, y, theta, theta0, w, batch_idx, C, K)
        t = theta.copy()
        m = np.zeros_like(t)
        v = np.zeros_like(t)
        _core.finetune_linear(t, theta0, X, y, w, 0.05, 0.3, 0.1, batch_idx[:10], 0, K, m, v, C)
        _core.finetune_linear(t, theta0, X, y, w, 0.05, 0.3, 0.1, batch_idx[10:], 10, K, m, v, C)
        np.testing.assert_array_equal(t, t_single)

    def test_invalid_shapes_rejected(self):
        X, y, theta, theta0, w, batch_idx, C, K = _instance(4)
        with pytest.raises(ValueError):
            _run(_core, X, y, theta[:-1], theta0, w, batch_idx, C, K)
        with pytest.raises(ValueError):
            _core.finetune_linear(
                theta.copy(), theta0, X, y, w, 0.05, 0.0, 0.1, batch_idx, 5, K,
                np.zeros_like(theta), np.zeros_like(theta), C,
            )  # t0 + K > t_total


@pytest.mark.parametrize("impl", [p for p in (_core, _fallback) if p is not None], ids=lambda m: m.__name__.rsplit(".", 1)[-1])
def test_divergence_reports_failure(impl):
    X, y, theta, theta0, w, batch_idx, C, K = _instance(5)
    # decoupled decay with an absurd rate amplifies theta geometrically to inf
    status, t, _, _ = _run(impl, X, y, theta, theta0, w, batch_idx, C, K, eta=1e160, delta=1.0)
    assert status == 1


def test_forced_python_backend(monkeypatch):
    import importlib
    import autoft._kernels as pkg

    monkeypatch.setenv("AUTOFT_BACKEND", "python")
    reloaded = importlib.reload(pkg)
    try:
        assert reloaded.backend_name() == "python"
    finally:
        monkeypatch.delenv("AUTOFT_BACKEND")
        importlib.reload(pkg)
