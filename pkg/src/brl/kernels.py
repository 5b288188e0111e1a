"""Backend selection for the loss kernels.

The compiled extension ``brl._kernels`` is used when it was built;
otherwise the numpy fallback in ``brl._kernels_py`` is used. Setting
``BRL_PURE_PYTHON=1`` forces the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

if os.environ.get("BRL_PURE_PYTHON", "") == "1":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def _vec(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def neumaier_sum(x) -> float:
    """Compensated sum of a 1-d array."""
    return float(_impl.neumaier_sum(_vec(x).ravel()))


def mean_sq_residual(pred, r, boot) -> float:
    """Mean of ``(pred - r - boot) ** 2`` with compensated summation."""
    return float(_impl.mean_sq_residual(_vec(pred), _vec(r), _vec(boot)))


def pairwise_mean_sq_residual(pred, r, boot) -> np.ndarray:
    """Matrix ``M[k, j] = mean_i (pred[k, i] - r[i] - boot[j, i]) ** 2``."""
    return np.asarray(_impl.pairwise_mean_sq_residual(_vec(pred), _vec(r), _vec(boot)))


def half_sq_diff_mean(boot1, boot2) -> np.ndarray:
    """Vector ``v[j] = mean_i 0.5 * (boot1[j, i] - boot2[j, i]) ** 2``."""
    return np.asarray(_impl.half_sq_diff_mean(_vec(boot1), _vec(boot2)))


def backend_module():
    return _impl
