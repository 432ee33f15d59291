"""Hot-loop kernels: compiled core when available, numpy fallback otherwise.

The backend is chosen once at import. Set ``AUTOFT_BACKEND=python`` to force
the fallback, or ``AUTOFT_BACKEND=compiled`` to insist on the extension
(raising if it was not built). Both backends implement the same contract and
agree to floating-point accumulation order differences only.
"""

from __future__ import annotations

import os

from . import _fallback

try:
    from . import _core
except ImportError:
    _core = None

_requested = os.environ.get("AUTOFT_BACKEND", "").strip().lower()
if _requested == "python":
    _impl = _fallback
elif _requested == "compiled":
    if _core is None:
        raise ImportError("AUTOFT_BACKEND=compiled but the extension is not built; run pip install -e .")
    _impl = _core
elif _requested == "":
    _impl = _core if _core is not None else _fallback
else:
    raise ImportError(f"unknown AUTOFT_BACKEND value {_requested!r} (use 'python' or 'compiled')")


def backend_name() -> str:
    return "compiled" if _impl is _core else "python"


def finetune_linear(theta, theta0, X, y, w, eta, delta, tau, batch_idx, t0, t_total, m, v, n_classes):
    return _impl.finetune_linear(theta, theta0, X, y, w, eta, delta, tau, batch_idx, t0, t_total, m, v, n_classes)
