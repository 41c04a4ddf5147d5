"""Forecast scoring: MSE, Pearson correlation, concordance correlation.

Correlations use population (biased) moments. Zero-variance inputs raise
instead of silently returning 0; the one defined degenerate case is
ccc(x, x) == 1 for a constant x.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, UsageError


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise UsageError("pred and truth must have the same shape")
    if p.size == 0:
        raise UsageError("series must be non-empty")
    return p.reshape(-1), t.reshape(-1)


def mse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean((p - t) ** 2))


def pearson_cc(pred, truth) -> float:
    p, t = _pair(pred, truth)
    if p.size < 2:
        raise UsageError("correlation needs at least two points")
    p_c = p - p.mean()
    t_c = t - t.mean()
    var_p = np.mean(p_c**2)
    var_t = np.mean(t_c**2)
    if var_p == 0.0 or var_t == 0.0:
        raise DomainError("correlation undefined for a zero-variance series")
    r = np.mean(p_c * t_c) / np.sqrt(var_p * var_t)
    return float(np.clip(r, -1.0, 1.0))


def ccc(pred, truth) -> float:
    p, t = _pair(pred, truth)
    if p.size < 2:
        raise UsageError("concordance needs at least two points")
    mu_p, mu_t = p.mean(), t.mean()
    var_p = np.mean((p - mu_p) ** 2)
    var_t = np.mean((t - mu_t) ** 2)
    if var_p == 0.0 or var_t == 0.0:
        if var_p == 0.0 and var_t == 0.0 and mu_p == mu_t:
            return 1.0
        raise DomainError("concordance undefined for a zero-variance series")
    cov = np.mean((p - mu_p) * (t - mu_t))
    value = 2.0 * cov / (var_p + var_t + (mu_p - mu_t) ** 2)
    return float(np.clip(value, -1.0, 1.0))
