"""Pure-numpy twin of the compiled fine-tuning kernel.

Same contract as ``autoft._kernels._core.finetune_linear``; built on the
reference composite-loss gradient and the AdamW update expression of
``autoft.models.adamw_step`` so it stays the single source of truth.
"""

from __future__ import annotations

import math

import numpy as np


def finetune_linear(theta, theta0, X, y, w, eta, delta, tau, batch_idx, t0, t_total, m, v, n_classes):
    """Run ``batch_idx.shape[0]`` AdamW steps of the composite objective in place.

    theta, m, v are updated in place; theta0 is the frozen pretrained point.
    Returns 0 on success, 1 if a non-finite loss or gradient appears (the
    caller marks the trial failed).
    """
    from ..losses import composite_grad
    from ..models import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, LinearForward, ParamLayout, ParamVector

    d = X.shape[1]
    layout = ParamLayout.linear(n_classes, d)
    params = ParamVector(theta, layout)
    init = ParamVector(theta0, layout)
    fwd = LinearForward(n_classes, d)

    for k in range(batch_idx.shape[0]):
        t = t0 + k
        lr = eta * 0.5 * (1.0 + math.cos(math.pi * t / t_total))
        idx = batch_idx[k]
        try:
            # non-finite intermediates are an expected failure mode here
            with np.errstate(over="ignore", invalid="ignore"):
                total, grad = composite_grad(params, init, (X[idx], y[idx]), w, fwd, tau)
        except ArithmeticError:
            return 1
        if not np.isfinite(total) or not np.all(np.isfinite(grad)):
            return 1
        t1 = t + 1
        m[:] = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grad
        v[:] = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * grad * grad
        m_hat = m / (1.0 - ADAM_BETA1**t1)
        v_hat = v / (1.0 - ADAM_BETA2**t1)
        with np.errstate(over="ignore", invalid="ignore"):
            theta[:] = theta - lr * (m_hat / (np.sqrt(v_hat) + ADAM_EPS)) - lr * delta * theta
    if not np.all(np.isfinite(theta)):
        return 1
    return 0
