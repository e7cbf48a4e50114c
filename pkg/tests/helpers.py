"""Shared test fixtures: cohort builders and independent likelihood oracles."""

import math

import numpy as np
from scipy import integrate

from fcsjm import CohortDataset, PeriodGrid


def build_cohort(marker_rows, event, time, female=None, older=None, omit=None):
    """Cohort from per-subject marker lists; None marks a missing cell."""
    marker = np.array(
        [[np.nan if v is None else float(v) for v in row] for row in marker_rows]
    )
    n, j = marker.shape
    event = np.asarray(event, dtype=int)
    time = np.asarray(time, dtype=float)
    if female is None:
        female = np.zeros(n, dtype=int)
    if older is None:
        older = np.zeros(n, dtype=int)
    return CohortDataset(
        grid=PeriodGrid(j),
        subject_ids=np.arange(1, n + 1),
        female=np.asarray(female, dtype=int),
        older=np.asarray(older, dtype=int),
        marker=marker,
        observed=~np.isnan(marker),
        event=event,
        event_time=time,
        event_period=np.ceil(time).astype(int),
        omit=None if omit is None else np.asarray(omit, dtype=int),
    )


def lmm_marginal_loglik(long, coef, resid_var, re_cov):
    """Gaussian marginal log-likelihood via dense per-subject covariances.

    Independent of the package's profiled sufficient-statistic algebra:
    builds V_i = sigma^2 I + Z_i D Z_i' explicitly and sums the usual
    multivariate-normal log density over subjects.
    """
    ll = 0.0
    for _, df in long.groupby("id"):
        t = df["time"].to_numpy(dtype=float)
        y = df["log_marker"].to_numpy(dtype=float)
        x = np.column_stack(
            [np.ones_like(t), t, df["female"].to_numpy(float), df["older"].to_numpy(float)]
        )
        z = np.column_stack([np.ones_like(t), t])
        v = resid_var * np.eye(t.size) + z @ re_cov @ z.T
        r = y - x @ coef
        _, logdet = np.linalg.slogdet(v)
        ll += -0.5 * (t.size * math.log(2 * math.pi) + logdet + r @ np.linalg.solve(v, r))
    return ll


def ph_loglik_null_assoc(cohort, coef_event, base_hazard):
    """Piecewise-constant proportional-hazards log-likelihood without frailty.

    Valid only when the trajectory coefficient is zero, where the event
    part of the joint likelihood separates from the random effects.
    """
    lam = np.asarray(base_hazard, dtype=float)
    gz = coef_event[0] * cohort.female + coef_event[1] * cohort.older
    k = np.arange(1, lam.size + 1, dtype=float)
    overlap = np.clip(cohort.event_time[:, None] - (k - 1)[None, :], 0.0, 1.0)
    cum = overlap @ lam
    piece = np.ceil(cohort.event_time).astype(int)
    log_lam = np.where(cohort.event == 1, np.log(lam[piece - 1]), 0.0)
    return float(np.sum(cohort.event * (log_lam + gz) - np.exp(gz) * cum))


def brute_force_jm_loglik(cohort, params, lag=1):
    """Joint-model marginal log-likelihood by direct 2-d numeric integration.

    Written from the model definition alone: per subject, the product of
    the longitudinal normal densities, the bivariate normal prior on the
    random effects, and the survival factor is integrated over the
    random effects with ``dblquad``.  The within-piece hazard integral
    has the closed exponential form, so only the two random-effect
    dimensions are integrated numerically.  Slow; tiny cohorts only.
    """
    beta = np.asarray(params.coef_long, dtype=float)
    sigma2 = float(params.resid_var)
    d = np.asarray(params.re_cov, dtype=float)
    gam = np.asarray(params.coef_event, dtype=float)
    alpha = float(params.assoc)
    lam = np.asarray(params.base_hazard, dtype=float)
    dinv = np.linalg.inv(d)
    dlogdet = np.linalg.slogdet(d)[1]
    times = cohort.grid.times
    span1 = 8.0 * math.sqrt(d[0, 0])
    span2 = 8.0 * math.sqrt(d[1, 1])

    def piece_integral(a, b, c0, c1):
        # integral over (a, b) of exp(c0 + c1 * s) ds
        if b <= a:
            return 0.0
        if abs(c1) < 1e-14:
            return math.exp(c0) * (b - a)
        return math.exp(c0) * (math.exp(c1 * b) - math.exp(c1 * a)) / c1

    total = 0.0
    for i in range(cohort.n_subjects):
        infu = times <= cohort.event_time[i]
        use = infu & ~np.isnan(cohort.marker[i])
        t_obs = times[use]
        y_obs = np.log(cohort.marker[i, use])
        f, o = float(cohort.female[i]), float(cohort.older[i])
        base = beta[0] + beta[2] * f + beta[3] * o
        gz = gam[0] * f + gam[1] * o
        t_end = float(cohort.event_time[i])
        delta = int(cohort.event[i])
        piece_end = int(math.ceil(t_end))

        def dens(v2, v1):
            level = base + v1
            slope = beta[1] + v2
            resid = y_obs - (level + slope * t_obs)
            ll = -0.5 * (
                t_obs.size * math.log(2 * math.pi * sigma2) + resid @ resid / sigma2
            )
            quad = dinv[0, 0] * v1**2 + 2 * dinv[0, 1] * v1 * v2 + dinv[1, 1] * v2**2
            ll += -math.log(2 * math.pi) - 0.5 * dlogdet - 0.5 * quad
            cum = 0.0
            for k in range(1, piece_end + 1):
                if lam[k - 1] == 0.0:
                    continue
                lo, hi = k - 1.0, min(float(k), t_end)
                c0 = math.log(lam[k - 1]) + gz + alpha * (level - slope * lag)
                cum += piece_integral(lo, hi, c0, alpha * slope)
            if delta:
                ll += (
                    math.log(lam[piece_end - 1])
                    + gz
                    + alpha * (level + slope * (t_end - lag))
                )
            return math.exp(ll - cum)

        val, _ = integrate.dblquad(
            dens, -span1, span1, -span2, span2, epsabs=1e-13, epsrel=1e-11
        )
        total += math.log(val)
    return total
