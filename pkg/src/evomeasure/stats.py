"""Resampling and interval helpers shared by the verifiers."""
from __future__ import annotations

import math

import numpy as np
from scipy.stats import norm

__all__ = [
    "bootstrap_mean_ci",
    "wilson_ci",
    "one_sided_increase_z",
    "permutation_pvalue",
]


def bootstrap_mean_ci(values, n_boot: int = 2000, level: float = 0.95, seed: int = 0):
    """Percentile bootstrap CI of the mean of a 1-D sample; columns if 2-D.

    Uses multinomial reweighting so the cost is one matrix product.
    """
    x = np.asarray(values, dtype=float)
    n = x.shape[0]
    est = x.mean(axis=0)
    if n < 2 or np.all(x == x[0]):
        return est, np.array(est, copy=True), np.array(est, copy=True)
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(n, np.full(n, 1.0 / n), size=n_boot) / n
    reps = counts @ x.reshape(n, -1)
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(reps, [a, 1.0 - a], axis=0)
    shape = np.shape(est)
    return est, lo.reshape(shape), hi.reshape(shape)


def wilson_ci(successes: int, trials: int, level: float = 0.95) -> tuple[float, float]:
    if trials <= 0:
        return 0.0, 1.0
    z = norm.ppf(0.5 + level / 2.0)
    phat = successes / trials
    denom = 1.0 + z * z / trials
    centre = (phat + z * z / (2 * trials)) / denom
    half = z * math.sqrt(phat * (1 - phat) / trials + z * z / (4 * trials * trials)) / denom
    lo = 0.0 if successes == 0 else float(max(0.0, centre - half))
    hi = 1.0 if successes == trials else float(min(1.0, centre + half))
    return lo, hi


def one_sided_increase_z(p_before: float, n_before: int, p_after: float, n_after: int) -> float:
    """p-value of H1: ``p_after > p_before`` (pooled two-proportion z-test)."""
    if p_after <= p_before:
        return 1.0
    pooled = (p_before * n_before + p_after * n_after) / (n_before + n_after)
    se = math.sqrt(pooled * (1 - pooled) * (1.0 / n_before + 1.0 / n_after))
    if se == 0.0:
        return 0.0
    return float(norm.sf((p_after - p_before) / se))


def permutation_pvalue(observed: float, null_stats) -> float:
    null_stats = np.asarray(null_stats)
    return float((1 + np.count_nonzero(null_stats >= observed)) / (null_stats.size + 1))
