"""Cohort generator: marker trajectories, event times, informative missingness.

Subjects carry a linear random-intercept random-slope trajectory for the
log marker, measured once per period with independent noise.  The event
process is discrete per period: starting from period 2, the probability
of an event during period ``j`` follows a logistic model on the baseline
covariates and the latent trajectory value one period earlier.  Within
the event period a continuous event time is drawn so that the period
count is preserved (``ceil(t)`` equals the event period) and the
within-period hazard is constant.

Missingness is generated per cell from a subject-level probability that
may depend on the latent random effects.  With both coefficients at zero
the mechanism is covariate-independent; nonzero coefficients tie the
chance of missingness to the subject's unobserved trajectory, so the
observed cells are no longer a random subset.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .cohort import CohortDataset, PeriodGrid, SimulatedTruth

__all__ = [
    "MarkerModelParams",
    "SurvivalModelParams",
    "MissingnessParams",
    "CovariateModel",
    "MISSINGNESS_SCENARIOS",
    "missingness_for_scenario",
    "survival_for_hypothesis",
    "simulate_markers",
    "simulate_events",
    "apply_missingness",
    "simulate_cohort",
]


@dataclass(frozen=True)
class MarkerModelParams:
    """Linear mixed model for the log marker.

    The trajectory of subject i evaluated at period index j is
    ``intercept + a_i + (time_slope + b_i) * j + coef_female * female_i
    + coef_older * older_i``; the measured log value adds independent
    noise with variance ``var_noise``.
    """

    intercept: float = 2.04
    time_slope: float = -0.02
    coef_female: float = 0.02
    coef_older: float = -0.07
    var_intercept: float = 0.0236
    var_slope: float = 0.0003
    var_noise: float = 0.006

    def __post_init__(self):
        if min(self.var_intercept, self.var_slope, self.var_noise) <= 0:
            raise ValueError("variance components must be positive")


@dataclass(frozen=True)
class SurvivalModelParams:
    """Per-period event probability on the logit scale.

    For period j >= 2, logit P(event during j | at risk) =
    ``intercept + coef_older * older + coef_female * female +
    assoc * trajectory(j - 1)``.  No events occur during period 1.
    """

    intercept: float = -5.0
    coef_older: float = 0.69
    coef_female: float = -0.3
    assoc: float = 1.4


@dataclass(frozen=True)
class MissingnessParams:
    """Subject-level cell-missingness probability on the logit scale.

    logit P(cell missing) = ``intercept + coef_rand_intercept * a_i +
    coef_rand_slope * b_i`` with (a_i, b_i) the subject's latent random
    effects.  Each cell is masked independently given the subject.
    """

    intercept: float = -0.405
    coef_rand_intercept: float = 0.0
    coef_rand_slope: float = 0.0


@dataclass(frozen=True)
class CovariateModel:
    """Bernoulli probabilities for the two baseline covariates."""

    p_female: float = 0.5
    p_older: float = 0.47

    def __post_init__(self):
        for name in ("p_female", "p_older"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")


MISSINGNESS_SCENARIOS = {
    "cmar": MissingnessParams(coef_rand_intercept=0.0, coef_rand_slope=0.0),
    "weak_nmar": MissingnessParams(coef_rand_intercept=2.0, coef_rand_slope=5.0),
    "strong_nmar": MissingnessParams(coef_rand_intercept=20.0, coef_rand_slope=25.0),
}


def missingness_for_scenario(name):
    """MissingnessParams preset for a named scenario."""
    try:
        return MISSINGNESS_SCENARIOS[name.lower()]
    except KeyError:
        raise ValueError(
            f"unknown scenario {name!r}; expected one of {sorted(MISSINGNESS_SCENARIOS)}"
        )


def survival_for_hypothesis(name, base=SurvivalModelParams()):
    """SurvivalModelParams with the marker association on (h1) or off (h0)."""
    key = name.lower()
    if key == "h1":
        return base
    if key == "h0":
        return replace(base, assoc=0.0)
    raise ValueError(f"unknown hypothesis {name!r}; expected 'h1' or 'h0'")


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def simulate_markers(n_subjects, params=MarkerModelParams(), grid=PeriodGrid(7),
                     covariates=CovariateModel(), rng=None):
    """Fully observed cohort of marker measurements, no events yet.

    Follow-up fields are placeholders (everyone censored at the end of
    the grid) until :func:`simulate_events` replaces them.  The latent
    random effects and the noise-free trajectory are kept on the cohort.
    """
    rng = _as_rng(rng)
    n = int(n_subjects)
    if n < 1:
        raise ValueError("n_subjects must be positive")
    j_count = grid.n_periods
    female = (rng.random(n) < covariates.p_female).astype(int)
    older = (rng.random(n) < covariates.p_older).astype(int)
    a = rng.normal(0.0, np.sqrt(params.var_intercept), n)
    b = rng.normal(0.0, np.sqrt(params.var_slope), n)
    noise = rng.normal(0.0, np.sqrt(params.var_noise), (n, j_count))
    periods = np.arange(1, j_count + 1, dtype=float)
    trajectory = (
        params.intercept
        + a[:, None]
        + (params.time_slope + b[:, None]) * periods[None, :]
        + params.coef_female * female[:, None]
        + params.coef_older * older[:, None]
    )
    log_marker = trajectory + noise
    marker = np.exp(log_marker)
    end = float(j_count)
    return CohortDataset(
        grid=grid,
        subject_ids=np.arange(1, n + 1),
        female=female,
        older=older,
        marker=marker,
        observed=np.ones((n, j_count), dtype=bool),
        event=np.zeros(n, dtype=int),
        event_time=np.full(n, end),
        event_period=np.full(n, j_count, dtype=int),
        latent=SimulatedTruth(rand_intercept=a, rand_slope=b, trajectory=trajectory),
    )


def simulate_events(cohort, params=SurvivalModelParams(), rng=None):
    """Draw event indicators and continuous event times onto a cohort.

    Requires the latent trajectory (a simulated cohort).  Subjects
    without an event by the end of the grid are censored there.  Within
    the event period the waiting time is drawn from a unit-interval
    truncated exponential whose total mass matches the period's event
    probability, so hazard is constant within periods and
    ``ceil(event_time) == event_period`` exactly.
    """
    if cohort.latent is None:
        raise ValueError("simulate_events needs a cohort with latent trajectories")
    rng = _as_rng(rng)
    n = cohort.n_subjects
    j_count = cohort.grid.n_periods
    trajectory = cohort.latent.trajectory
    u_hit = rng.random((n, j_count - 1))
    u_wait = rng.random((n, j_count - 1))
    event = np.zeros(n, dtype=int)
    event_time = np.full(n, float(j_count))
    event_period = np.full(n, j_count, dtype=int)
    at_risk = np.ones(n, dtype=bool)
    linpred_base = params.intercept + params.coef_older * cohort.older + params.coef_female * cohort.female
    for j in range(2, j_count + 1):
        p = expit(linpred_base + params.assoc * trajectory[:, j - 2])
        hit = at_risk & (u_hit[:, j - 2] < p)
        if hit.any():
            lam = -np.log1p(-p[hit])
            u = u_wait[hit, j - 2]
            wait = -np.log1p(-(1.0 - u) * (1.0 - np.exp(-lam))) / lam
            event[hit] = 1
            event_time[hit] = (j - 1) + wait
            event_period[hit] = j
            at_risk &= ~hit
    return replace(
        cohort,
        event=event,
        event_time=event_time,
        event_period=event_period,
        # simulated values are fully observed until a mask is applied
        observed=np.ones((n, j_count), dtype=bool),
    )


def apply_missingness(cohort, params, rng=None):
    """Mask marker cells according to a subject-level missingness model.

    Returns a new cohort whose masked cells are NaN with
    ``observed == False``; the latent truth is carried over unchanged.
    The source cohort must be fully observed.
    """
    if cohort.latent is None:
        raise ValueError("apply_missingness needs a cohort with latent random effects")
    if not cohort.observed.all():
        raise ValueError("apply_missingness expects a fully observed cohort")
    rng = _as_rng(rng)
    a = cohort.latent.rand_intercept
    b = cohort.latent.rand_slope
    p_miss = expit(
        params.intercept + params.coef_rand_intercept * a + params.coef_rand_slope * b
    )
    missing = rng.random(cohort.marker.shape) < p_miss[:, None]
    marker = np.where(missing, np.nan, cohort.marker)
    return cohort.with_marker(marker, observed=~missing)


def simulate_cohort(n_subjects, scenario="strong_nmar", hypothesis="h1", seed=0,
                    grid=PeriodGrid(7), marker_params=MarkerModelParams(),
                    covariates=CovariateModel()):
    """Full generation pipeline for a named scenario and hypothesis.

    Returns ``(full, masked)``: the fully observed cohort and the same
    cohort after masking.  The three generation stages draw from
    independent child streams of ``seed``, so the underlying cohort is
    identical across missingness scenarios at the same seed.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    marker_ss, event_ss, miss_ss = ss.spawn(3)
    surv = survival_for_hypothesis(hypothesis)
    miss = missingness_for_scenario(scenario)
    full = simulate_markers(
        n_subjects, marker_params, grid, covariates, rng=np.random.default_rng(marker_ss)
    )
    full = simulate_events(full, surv, rng=np.random.default_rng(event_ss))
    tag = f"{scenario.lower()}:{hypothesis.lower()}"
    full = replace(full, scenario_tag=tag)
    masked = apply_missingness(full, miss, rng=np.random.default_rng(miss_ss))
    return full, masked
