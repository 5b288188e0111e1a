"""Pure-Python/numpy versions of the compiled loss kernels.

``math.fsum`` returns the exactly rounded sum, so these agree with the
compensated Cython loops to within a couple of ulps.
"""
from __future__ import annotations

import math

import numpy as np


def neumaier_sum(x: np.ndarray) -> float:
    return math.fsum(np.asarray(x, dtype=np.float64))


def mean_sq_residual(pred: np.ndarray, r: np.ndarray, boot: np.ndarray) -> float:
    n = len(pred)
    if n == 0:
        return 0.0
    d = np.asarray(pred, dtype=np.float64) - r - boot
    return math.fsum(d * d) / n


def pairwise_mean_sq_residual(pred: np.ndarray, r: np.ndarray, boot: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    boot = np.asarray(boot, dtype=np.float64)
    K, n = pred.shape
    J = boot.shape[0]
    out = np.zeros((K, J))
    if n == 0:
        return out
    shifted = pred - r
    for j in range(J):
        d = shifted - boot[j]
        sq = d * d
        out[:, j] = [math.fsum(row) / n for row in sq]
    return out


def half_sq_diff_mean(boot1: np.ndarray, boot2: np.ndarray) -> np.ndarray:
    boot1 = np.asarray(boot1, dtype=np.float64)
    boot2 = np.asarray(boot2, dtype=np.float64)
    J, n = boot1.shape
    if n == 0:
        return np.zeros(J)
    d = boot1 - boot2
    half = 0.5 * d * d
    return np.array([math.fsum(row) / n for row in half])
