"""Combination of repeated-imputation estimates and study-level summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

__all__ = ["PooledEstimate", "rubin_pool", "StudyMetrics", "compute_metrics"]


@dataclass(frozen=True)
class PooledEstimate:
    """Scalar estimate combined across imputation multiples.

    ``df`` uses the small-sample adjustment that shrinks the classical
    between/within degrees of freedom toward the complete-data value
    when one is supplied.  ``frac_missing_info`` is
    (1 + 1/m) * between / total.
    """

    estimate: float
    std_error: float
    within_var: float
    between_var: float
    total_var: float
    df: float
    frac_missing_info: float
    ci_low: float
    ci_high: float
    n_multiples: int
    confidence: float


def rubin_pool(estimates, variances, confidence=0.95, df_complete=None):
    """Pool per-multiple point estimates and squared standard errors.

    Parameters
    ----------
    estimates, variances : sequence of float
        One entry per imputation multiple; ``variances`` are squared
        standard errors.  At least two multiples are required.
    confidence : float
        Two-sided interval level in (0, 1).
    df_complete : float, optional
        Complete-data degrees of freedom; when given, the interval df is
        the harmonic combination of the classical value with the
        observed-data component, keeping df below ``df_complete``.
    """
    q = np.asarray(estimates, dtype=float)
    u = np.asarray(variances, dtype=float)
    if q.ndim != 1 or q.shape != u.shape:
        raise ValueError("estimates and variances must be matching 1-d sequences")
    m = q.size
    if m < 2:
        raise ValueError("pooling requires at least two multiples")
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    if np.isnan(q).any() or np.isnan(u).any() or (u < 0).any():
        raise ValueError("estimates and variances must be finite with variances >= 0")
    qbar = q.mean()
    within = u.mean()
    between = q.var(ddof=1)
    total = within + (1.0 + 1.0 / m) * between
    if total > 0:
        lam = (1.0 + 1.0 / m) * between / total
    else:
        lam = 0.0
    if lam > 0:
        df_classic = (m - 1) / lam**2
    else:
        df_classic = math.inf
    if df_complete is None:
        df = df_classic
    else:
        if df_complete <= 0:
            raise ValueError("df_complete must be positive")
        df_obs = (df_complete + 1.0) / (df_complete + 3.0) * df_complete * (1.0 - lam)
        if math.isinf(df_classic):
            df = df_obs
        else:
            df = 1.0 / (1.0 / df_classic + 1.0 / df_obs)
    se = math.sqrt(total)
    tcrit = stats.t.ppf(0.5 + confidence / 2.0, df) if math.isfinite(df) else stats.norm.ppf(0.5 + confidence / 2.0)
    return PooledEstimate(
        estimate=float(qbar),
        std_error=se,
        within_var=float(within),
        between_var=float(between),
        total_var=float(total),
        df=float(df),
        frac_missing_info=float(lam),
        ci_low=float(qbar - tcrit * se),
        ci_high=float(qbar + tcrit * se),
        n_multiples=int(m),
        confidence=float(confidence),
    )


@dataclass(frozen=True)
class StudyMetrics:
    """Replication-level summaries of an estimator against a known truth.

    ``percent_bias`` is NaN when the truth is zero (absolute bias is
    always reported); ``type1_rate`` is NaN unless the truth is zero.
    ``mean_mc_low`` / ``mean_mc_high`` bound the mean estimate with a
    normal-approximation Monte Carlo interval.
    """

    n_replications: int
    truth: float
    mean_estimate: float
    mean_mc_low: float
    mean_mc_high: float
    absolute_bias: float
    percent_bias: float
    rmse: float
    empirical_sd: float
    coverage: float
    type1_rate: float
    confidence: float


def compute_metrics(estimates, ci_lows, ci_highs, truth, std_errors=None, dfs=None,
                    confidence=0.95):
    """Bias, RMSE, interval coverage and (under a zero truth) rejection rate.

    ``std_errors``/``dfs`` feed the per-replication Wald test used for
    the rejection rate; with ``dfs`` omitted the normal reference is
    used.  Replications are weighted equally.
    """
    est = np.asarray(estimates, dtype=float)
    lo = np.asarray(ci_lows, dtype=float)
    hi = np.asarray(ci_highs, dtype=float)
    if est.ndim != 1 or est.size == 0 or est.shape != lo.shape or est.shape != hi.shape:
        raise ValueError("estimates and interval bounds must be matching non-empty 1-d sequences")
    r = est.size
    mean = est.mean()
    sd = est.std(ddof=1) if r > 1 else 0.0
    half = stats.norm.ppf(0.5 + confidence / 2.0) * sd / math.sqrt(r)
    bias = mean - truth
    pbias = 100.0 * bias / truth if truth != 0 else math.nan
    rmse = math.sqrt(np.mean((est - truth) ** 2))
    coverage = float(np.mean((lo <= truth) & (truth <= hi)))
    type1 = math.nan
    if truth == 0 and std_errors is not None:
        se = np.asarray(std_errors, dtype=float)
        if se.shape != est.shape or (se <= 0).any():
            raise ValueError("std_errors must match estimates and be positive")
        if dfs is None:
            crit = np.full(r, stats.norm.ppf(0.5 + confidence / 2.0))
        else:
            d = np.asarray(dfs, dtype=float)
            if d.shape != est.shape or (d <= 0).any():
                raise ValueError("dfs must match estimates and be positive")
            crit = np.where(np.isfinite(d), stats.t.ppf(0.5 + confidence / 2.0, d),
                            stats.norm.ppf(0.5 + confidence / 2.0))
        type1 = float(np.mean(np.abs(est / se) >= crit))
    return StudyMetrics(
        n_replications=int(r),
        truth=float(truth),
        mean_estimate=float(mean),
        mean_mc_low=float(mean - half),
        mean_mc_high=float(mean + half),
        absolute_bias=float(bias),
        percent_bias=float(pbias),
        rmse=float(rmse),
        empirical_sd=float(sd),
        coverage=coverage,
        type1_rate=type1,
        confidence=float(confidence),
    )
