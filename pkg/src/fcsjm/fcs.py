"""Chained-equations multiple imputation of the marker grid.

Missing log-marker cells are filled period by period with Bayesian
linear regressions: the model for period j regresses its observed log
values on the current values of every other period, the baseline
covariates, and event-history features, then imputes the period's
missing cells from a posterior draw of the coefficients and residual
variance.  Sweeping all periods a fixed number of times and repeating
from independent starts yields the imputation multiples.

Two versions differ in one predictor: the ``modified`` version adds the
flag for subjects with no observed value during follow-up, allowing
their imputed level to differ systematically from subjects whose cells
are only partially missing.  The ``standard`` version leaves it out.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from scipy.linalg import solve_triangular

from .cohort import truncate_post_event
from .errors import ImputationError

__all__ = [
    "ImputationSpec",
    "EventFeatures",
    "PeriodImputationModel",
    "CompletedDataset",
    "build_event_features",
    "initial_fill",
    "draw_posterior_and_impute",
    "run_fcs",
    "truncate_post_event",
    "imputation_diagnostics",
]

_VERSIONS = ("standard", "modified")


@dataclass(frozen=True)
class ImputationSpec:
    """Settings for one chained-equations run.

    ``lag`` is the marker-to-event offset in periods: the event feature
    for the period-j model flags events during periods j+1..j+lag
    (period j itself when lag is 0).  ``include_post_event_values``
    keeps marker measurements taken after the event in the imputation
    data; when False they are treated as missing and replaced.
    ``flag_all_periods`` controls whether the modified version's flag
    enters the first period's model as well.
    """

    version: str = "modified"
    n_multiples: int = 5
    n_iterations: int = 10
    lag: int = 1
    include_post_event_values: bool = True
    flag_all_periods: bool = True

    def __post_init__(self):
        if self.version not in _VERSIONS:
            raise ValueError(f"version must be one of {_VERSIONS}, got {self.version!r}")
        if self.n_multiples < 2:
            raise ValueError("n_multiples must be at least 2")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be at least 1")
        if self.lag < 0:
            raise ValueError("lag must be a non-negative integer")


@dataclass(frozen=True)
class EventFeatures:
    """Per-period event-history predictors for the imputation models.

    ``indicator[:, j-1]`` flags an event during the lag window that the
    period-j measurement feeds into.  For lags beyond one period the
    window covers several periods of unequal exposure, so
    ``cum_hazard`` adds the cumulative marginal discrete hazard each
    subject accumulated inside the window; for lags 0 and 1 it is None.
    """

    lag: int
    indicator: np.ndarray
    cum_hazard: np.ndarray | None


@dataclass(frozen=True)
class PeriodImputationModel:
    """Fitted regression used to impute one period during the final sweep."""

    period: int
    column_names: tuple[str, ...]
    coef: np.ndarray
    resid_var: float
    n_observed: int
    n_imputed: int


@dataclass(frozen=True)
class CompletedDataset:
    """One imputation multiple.

    The cohort's marker grid has no missing cells; its ``observed`` mask
    keeps the pre-imputation meaning, so imputed cells are exactly those
    with ``observed == False``.  ``sweep_changes`` holds the mean
    absolute change of imputed cells from one sweep to the next.
    """

    multiple_index: int
    cohort: CohortDataset
    sweep_changes: tuple[float, ...]
    period_models: tuple[PeriodImputationModel, ...]

    def truncated(self):
        """Copy with post-follow-up marker cells removed."""
        return replace(self, cohort=truncate_post_event(self.cohort))


def build_event_features(cohort, lag=1):
    """Event-history predictors aligned with each measurement period.

    With ``lag >= 1`` the indicator for period j flags an event during
    periods j+1..j+lag; with ``lag == 0`` it flags an event during
    period j itself.  For ``lag > 1`` a cumulative-hazard column is
    added: the sum of marginal per-period event fractions
    (events / at-risk) over the part of the window the subject remained
    under observation.
    """
    if lag < 0:
        raise ValueError("lag must be a non-negative integer")
    n = cohort.n_subjects
    j_count = cohort.grid.n_periods
    periods = np.arange(1, j_count + 1)
    is_event = cohort.event == 1
    indicator = np.zeros((n, j_count))
    for j in periods:
        if lag == 0:
            hit = is_event & (cohort.event_period == j)
        else:
            hit = is_event & (cohort.event_period > j) & (cohort.event_period <= j + lag)
        indicator[:, j - 1] = hit
    cum_hazard = None
    if lag > 1:
        at_risk = cohort.event_period[:, None] >= periods[None, :]
        events_l = ((is_event[:, None]) & (cohort.event_period[:, None] == periods[None, :])).sum(axis=0)
        n_risk = at_risk.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            h0 = np.where(n_risk > 0, events_l / np.maximum(n_risk, 1), 0.0)
        cum_hazard = np.zeros((n, j_count))
        for j in periods:
            window = periods[(periods > j) & (periods <= j + lag)]
            if window.size == 0:
                continue
            exposed = cohort.event_period[:, None] >= window[None, :]
            cum_hazard[:, j - 1] = exposed @ h0[window - 1]
    return EventFeatures(lag=int(lag), indicator=indicator, cum_hazard=cum_hazard)


def initial_fill(cohort, rng):
    """Fill missing marker cells by resampling observed values per period.

    Cells in a period with no observed values fall back to resampling
    from all observed cells of the cohort, with a warning.  Returns a
    cohort whose marker grid is complete; the observed mask is kept.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if not cohort.observed.any():
        raise ImputationError("cohort has no observed marker values to resample from")
    marker = cohort.marker.copy()
    pooled = cohort.marker[cohort.observed]
    for j in range(cohort.grid.n_periods):
        col_obs = cohort.observed[:, j]
        n_mis = int((~col_obs).sum())
        if n_mis == 0:
            continue
        donors = cohort.marker[col_obs, j]
        if donors.size == 0:
            warnings.warn(
                f"period {j + 1} has no observed values; starting values drawn "
                "from all observed cells",
                stacklevel=2,
            )
            donors = pooled
        marker[~col_obs, j] = donors[rng.integers(0, donors.size, size=n_mis)]
    return cohort.with_marker(marker)


def draw_posterior_and_impute(x_obs, y_obs, x_mis, rng):
    """Bayesian linear-regression imputation for one period.

    Draws the residual variance from its scaled inverse chi-square
    posterior, the coefficients from their normal posterior given that
    variance, and returns imputed outcomes with residual noise added:
    ``(imputed, coef_draw, var_draw)``.  ``x_obs`` must have full column
    rank with more rows than columns.
    """
    x_obs = np.asarray(x_obs, dtype=float)
    y_obs = np.asarray(y_obs, dtype=float)
    x_mis = np.asarray(x_mis, dtype=float)
    n, k = x_obs.shape
    if n <= k:
        raise ImputationError(
            f"regression needs more observed rows than predictors (n={n}, k={k})"
        )
    q, r = np.linalg.qr(x_obs)
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-10 * max(diag.max(), 1.0):
        raise ImputationError("design matrix is rank deficient after pruning")
    qty = q.T @ y_obs
    coef_hat = solve_triangular(r, qty, lower=False)
    resid = y_obs - x_obs @ coef_hat
    rss = float(resid @ resid)
    chi2 = rng.chisquare(n - k)
    var_draw = rss / chi2 if chi2 > 0 else rss
    z = rng.standard_normal(k)
    coef_draw = coef_hat + np.sqrt(var_draw) * solve_triangular(r, z, lower=False)
    noise = rng.standard_normal(x_mis.shape[0])
    imputed = x_mis @ coef_draw + np.sqrt(var_draw) * noise
    return imputed, coef_draw, var_draw


def _prune_columns(x, names, tol=1e-8):
    """Keep a maximal independent prefix-greedy subset of columns.

    Columns are scanned in order; each is kept if it is not (nearly) in
    the span of those already kept, so later-added columns are the ones
    dropped when redundant.
    """
    keep = []
    basis = None
    for idx in range(x.shape[1]):
        c = x[:, idx]
        norm0 = np.linalg.norm(c)
        if norm0 < 1e-12:
            continue
        if basis is None:
            keep.append(idx)
            basis = (c / norm0)[:, None]
            continue
        # two orthogonalization passes for numerical stability
        r = c - basis @ (basis.T @ c)
        r = r - basis @ (basis.T @ r)
        norm_r = np.linalg.norm(r)
        if norm_r > tol * norm0:
            keep.append(idx)
            basis = np.hstack([basis, (r / norm_r)[:, None]])
    kept_names = tuple(names[i] for i in keep)
    return keep, kept_names


def _period_design(log_grid, cohort, features, period, version, flag_all_periods):
    """Design matrix and column names for one period's regression."""
    j = period
    cols = [np.ones(cohort.n_subjects)]
    names = ["const"]
    for k in range(1, cohort.grid.n_periods + 1):
        if k == j:
            continue
        cols.append(log_grid[:, k - 1])
        names.append(f"log_h{k}")
    cols.append(cohort.female.astype(float))
    names.append("female")
    cols.append(cohort.older.astype(float))
    names.append("older")
    cols.append(features.indicator[:, j - 1])
    names.append("event_window")
    if features.cum_hazard is not None:
        cols.append(features.cum_hazard[:, j - 1])
        names.append("cum_hazard")
    if version == "modified" and (flag_all_periods or j > 1):
        cols.append(cohort.omit.astype(float))
        names.append("all_missing_flag")
    return np.column_stack(cols), names


def run_fcs(cohort, spec, rng):
    """Produce ``spec.n_multiples`` completed datasets by chained equations.

    Requires a cohort whose all-missing flag has been derived.  Each
    multiple starts from its own resampled fill and runs
    ``spec.n_iterations`` full sweeps over the periods in ascending
    order, refitting and redrawing each period's model on the current
    completed data.  Marker cells measured after the event are imputed
    like any others here; remove them afterwards with
    :func:`truncate_post_event` before model fitting.
    """
    if cohort.omit is None:
        raise ImputationError("run_fcs requires derive_omit to have been applied")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    work = cohort
    if not spec.include_post_event_values:
        keep = cohort.observed & cohort.in_followup()
        work = cohort.with_marker(np.where(keep, cohort.marker, np.nan), keep)
    features = build_event_features(work, spec.lag)
    target = ~work.observed
    completed = []
    for index, child in enumerate(rng.spawn(spec.n_multiples)):
        filled = initial_fill(work, child)
        log_grid = np.log(filled.marker)
        sweep_changes = []
        period_models = []
        for sweep in range(spec.n_iterations):
            before = log_grid[target].copy() if target.any() else np.empty(0)
            last_sweep = sweep == spec.n_iterations - 1
            if last_sweep:
                period_models = []
            for j in range(1, work.grid.n_periods + 1):
                mis = target[:, j - 1]
                if not mis.any():
                    continue
                x, names = _period_design(
                    log_grid, work, features, j, spec.version, spec.flag_all_periods
                )
                obs = ~mis
                # prune on the fit rows: a column can be degenerate there
                # (the all-missing flag never has observed first-period
                # rows) while varying over the imputation targets
                keep_idx, kept_names = _prune_columns(x[obs], names)
                x = x[:, keep_idx]
                try:
                    imputed, coef, var = draw_posterior_and_impute(
                        x[obs], log_grid[obs, j - 1], x[mis], child
                    )
                except ImputationError as exc:
                    raise ImputationError(f"period {j}: {exc}") from exc
                log_grid[mis, j - 1] = imputed
                if last_sweep:
                    period_models.append(
                        PeriodImputationModel(
                            period=j,
                            column_names=kept_names,
                            coef=coef,
                            resid_var=float(var),
                            n_observed=int(obs.sum()),
                            n_imputed=int(mis.sum()),
                        )
                    )
            after = log_grid[target] if target.any() else np.empty(0)
            sweep_changes.append(float(np.mean(np.abs(after - before))) if after.size else 0.0)
        marker = np.where(target, np.exp(log_grid), work.marker)
        completed.append(
            CompletedDataset(
                multiple_index=index,
                cohort=work.with_marker(marker),
                sweep_changes=tuple(sweep_changes),
                period_models=tuple(period_models),
            )
        )
    return completed


def imputation_diagnostics(standard, modified, reference=None):
    """Per-period means of imputed log values by flagged subgroup.

    ``standard`` and ``modified`` are sequences of completed datasets
    from the two versions on the same cohort.  Cells still present and
    not originally observed are averaged over subjects and multiples,
    separately for flagged (no observed value in follow-up) and
    remaining subjects, with modified/standard ratios.  When a fully
    observed ``reference`` cohort is given, the same cells' true values
    are averaged alongside.
    """
    if not standard or not modified:
        raise ValueError("both version's completed datasets are required")
    base = standard[0].cohort
    if base.omit is None:
        raise ValueError("completed datasets must carry the all-missing flag")
    j_count = base.grid.n_periods
    flagged = base.omit == 1
    # imputed cells still present; identical across multiples of a run
    cells = ~base.observed & ~np.isnan(base.marker)
    group_cells = [cells & flagged[:, None], cells & ~flagged[:, None]]

    def group_means(grids):
        out = np.empty((2, j_count))
        for gi, gc in enumerate(group_cells):
            cnt = gc.sum(axis=0) * len(grids)
            tot = sum(np.where(gc, g, 0.0).sum(axis=0) for g in grids)
            with np.errstate(invalid="ignore", divide="ignore"):
                out[gi] = np.where(cnt > 0, tot / cnt, np.nan)
        return out

    std_mean = group_means([c.cohort.log_marker for c in standard])
    mod_mean = group_means([c.cohort.log_marker for c in modified])
    with np.errstate(invalid="ignore", divide="ignore"):
        flagged_ratio = mod_mean[0] / std_mean[0]
        rest_ratio = mod_mean[1] / std_mean[1]
    data = {
        "period": np.arange(1, j_count + 1),
        "time": base.grid.times,
        "n_flagged": np.full(j_count, int(flagged.sum())),
        "flagged_standard": std_mean[0],
        "flagged_modified": mod_mean[0],
        "flagged_ratio": flagged_ratio,
        "rest_standard": std_mean[1],
        "rest_modified": mod_mean[1],
        "rest_ratio": rest_ratio,
    }
    if reference is not None:
        ref = reference.log_marker
        if not np.array_equal(reference.subject_ids, base.subject_ids):
            idx = {sid: i for i, sid in enumerate(reference.subject_ids)}
            order = np.array([idx[sid] for sid in base.subject_ids])
            ref = ref[order]
        ref_means = group_means([ref])
        data["flagged_reference"] = ref_means[0]
        data["rest_reference"] = ref_means[1]
    return pd.DataFrame(data)
