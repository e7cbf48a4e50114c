"""Cohort data model for periodically measured markers and event follow-up.

A cohort holds one row per subject: two baseline binary covariates, a
positive-valued marker measured on a shared mid-period grid, and
time-to-event follow-up (continuous event or censoring time plus an
event indicator).  Missing marker cells are tracked with an explicit
boolean mask so that imputed values can later be distinguished from
observed ones; the value array carries NaN wherever no value is known.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import IngestionError

__all__ = [
    "PeriodGrid",
    "SimulatedTruth",
    "SubjectRecord",
    "CohortDataset",
    "derive_omit",
    "to_long_format",
    "truncate_post_event",
    "write_wide_csv",
    "read_wide_csv",
]


@dataclass(frozen=True)
class PeriodGrid:
    """Shared measurement schedule: ``n_periods`` periods of unit length.

    Period ``j`` (1-based) covers the interval ``(j-1, j]`` and the marker
    is measured once per period, at the midpoint ``j - 0.5``.
    """

    n_periods: int

    def __post_init__(self):
        if not isinstance(self.n_periods, (int, np.integer)) or self.n_periods < 1:
            raise ValueError(f"n_periods must be a positive integer, got {self.n_periods!r}")

    @property
    def times(self):
        """Measurement times for periods 1..n_periods."""
        return np.arange(1, self.n_periods + 1, dtype=float) - 0.5

    def measurement_time(self, period):
        """Measurement time of a 1-based period index."""
        if not 1 <= period <= self.n_periods:
            raise ValueError(f"period must be in 1..{self.n_periods}, got {period}")
        return period - 0.5

    def period_of(self, t):
        """1-based period containing continuous time ``t`` (period j is (j-1, j])."""
        return int(math.ceil(t))


@dataclass(frozen=True)
class SimulatedTruth:
    """Latent quantities kept alongside a simulated cohort.

    ``trajectory`` is the noise-free subject-specific mean of the
    log marker at every scheduled measurement time, including times
    after the event or after masking.
    """

    rand_intercept: np.ndarray
    rand_slope: np.ndarray
    trajectory: np.ndarray


@dataclass(frozen=True)
class SubjectRecord:
    """Read-only view of a single subject's row."""

    subject_id: int
    female: int
    older: int
    marker: np.ndarray
    observed: np.ndarray
    event: int
    event_time: float
    event_period: int
    omit: int | None = None


@dataclass(frozen=True)
class CohortDataset:
    """Array-backed cohort with a shared measurement grid.

    ``marker`` is an ``(n, J)`` array of positive marker values with NaN
    where no value is available; ``observed`` is the matching boolean
    mask of originally observed cells.  After imputation the mask keeps
    its original meaning while the NaNs are replaced, so imputed cells
    are exactly those with a value but ``observed == False``.

    ``event_time`` is continuous; for events it satisfies
    ``event_period == ceil(event_time)``.  ``omit`` is None until
    :func:`derive_omit` has flagged subjects with no observed marker
    value at any measurement time inside follow-up.
    """

    grid: PeriodGrid
    subject_ids: np.ndarray
    female: np.ndarray
    older: np.ndarray
    marker: np.ndarray
    observed: np.ndarray
    event: np.ndarray
    event_time: np.ndarray
    event_period: np.ndarray
    omit: np.ndarray | None = None
    latent: SimulatedTruth | None = None
    scenario_tag: str = ""

    def __post_init__(self):
        n, j = self.marker.shape
        if j != self.grid.n_periods:
            raise ValueError(
                f"marker has {j} columns but grid declares {self.grid.n_periods} periods"
            )
        for name in ("subject_ids", "female", "older", "event", "event_time", "event_period"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
        if self.observed.shape != (n, j) or self.observed.dtype != bool:
            raise ValueError("observed must be a boolean array matching marker's shape")
        if self.omit is not None and self.omit.shape != (n,):
            raise ValueError(f"omit must have shape ({n},)")
        if len(np.unique(self.subject_ids)) != n:
            raise ValueError("subject_ids must be unique")
        for name in ("female", "older", "event"):
            vals = getattr(self, name)
            if not np.isin(vals, (0, 1)).all():
                raise ValueError(f"{name} must be binary 0/1")
        if np.isnan(self.marker[self.observed]).any():
            raise ValueError("observed cells must carry a marker value")
        with np.errstate(invalid="ignore"):
            bad = np.where(~np.isnan(self.marker) & (self.marker <= 0))
        if bad[0].size:
            raise ValueError(
                f"marker values must be positive; first offender at subject index "
                f"{bad[0][0]}, period {bad[1][0] + 1}"
            )
        if (self.event_time <= 0).any():
            raise ValueError("event_time must be positive")
        ev = self.event == 1
        per = np.ceil(self.event_time[ev]).astype(int)
        if not np.array_equal(per, self.event_period[ev]):
            raise ValueError("event_period must equal ceil(event_time) for events")

    @property
    def n_subjects(self):
        return self.marker.shape[0]

    @property
    def log_marker(self):
        """Natural log of the marker; NaN where missing."""
        with np.errstate(invalid="ignore"):
            return np.log(self.marker)

    def subject(self, index):
        """SubjectRecord view of row ``index``."""
        return SubjectRecord(
            subject_id=int(self.subject_ids[index]),
            female=int(self.female[index]),
            older=int(self.older[index]),
            marker=self.marker[index].copy(),
            observed=self.observed[index].copy(),
            event=int(self.event[index]),
            event_time=float(self.event_time[index]),
            event_period=int(self.event_period[index]),
            omit=None if self.omit is None else int(self.omit[index]),
        )

    def select(self, mask):
        """New cohort keeping only the subjects where ``mask`` is True."""
        mask = np.asarray(mask, dtype=bool)
        latent = self.latent
        if latent is not None:
            latent = SimulatedTruth(
                rand_intercept=latent.rand_intercept[mask].copy(),
                rand_slope=latent.rand_slope[mask].copy(),
                trajectory=latent.trajectory[mask].copy(),
            )
        return CohortDataset(
            grid=self.grid,
            subject_ids=self.subject_ids[mask].copy(),
            female=self.female[mask].copy(),
            older=self.older[mask].copy(),
            marker=self.marker[mask].copy(),
            observed=self.observed[mask].copy(),
            event=self.event[mask].copy(),
            event_time=self.event_time[mask].copy(),
            event_period=self.event_period[mask].copy(),
            omit=None if self.omit is None else self.omit[mask].copy(),
            latent=latent,
            scenario_tag=self.scenario_tag,
        )

    def with_marker(self, marker, observed=None):
        """New cohort with replaced marker values (and optionally mask)."""
        return replace(
            self,
            marker=np.asarray(marker, dtype=float),
            observed=self.observed if observed is None else np.asarray(observed, dtype=bool),
        )

    def in_followup(self):
        """Boolean (n, J) mask of cells measured at or before each subject's event_time."""
        return self.grid.times[None, :] <= self.event_time[:, None]


def derive_omit(cohort):
    """Flag subjects with no observed marker value during follow-up.

    Subjects whose follow-up ends before the first measurement time are
    dropped: they contribute no marker information and no at-risk period
    beyond the first.  Among the remaining subjects, ``omit = 1`` when
    every in-follow-up cell is unobserved.  Idempotent.
    """
    first_time = cohort.grid.measurement_time(1)
    keep = cohort.event_time >= first_time
    out = cohort.select(keep) if not keep.all() else cohort
    infu = out.in_followup()
    omit = np.where((out.observed & infu).sum(axis=1) == 0, 1, 0).astype(int)
    return replace(out, omit=omit)


def to_long_format(cohort, drop_post_event=False):
    """One row per non-missing (subject, period) cell, log scale.

    Columns: id, period, time, log_marker, female, older.  When
    ``drop_post_event`` is True, cells measured after the event or
    censoring time are excluded (a cell measured exactly at
    ``event_time`` is kept).
    """
    has_value = ~np.isnan(cohort.marker)
    if drop_post_event:
        has_value &= cohort.in_followup()
    rows, cols = np.nonzero(has_value)
    return pd.DataFrame(
        {
            "id": cohort.subject_ids[rows],
            "period": cols + 1,
            "time": cohort.grid.times[cols],
            "log_marker": np.log(cohort.marker[rows, cols]),
            "female": cohort.female[rows],
            "older": cohort.older[rows],
        }
    )


def truncate_post_event(cohort):
    """Remove marker cells measured after the event or censoring time.

    Post-follow-up cells lose both their value and their observed flag,
    whether originally observed or imputed.
    """
    infu = cohort.in_followup()
    marker = np.where(infu, cohort.marker, np.nan)
    observed = cohort.observed & infu
    return cohort.with_marker(marker, observed)


def write_wide_csv(cohort, path):
    """Write one row per subject: id,female,older,h1..hJ,event,time.

    Missing marker cells are written as empty fields.  Floats are
    written with full shortest-roundtrip precision so that reading the
    file back reproduces the cohort exactly.
    """
    path = Path(path)
    j = cohort.grid.n_periods
    header = ["id", "female", "older"] + [f"h{k}" for k in range(1, j + 1)] + ["event", "time"]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(cohort.n_subjects):
            row = [int(cohort.subject_ids[i]), int(cohort.female[i]), int(cohort.older[i])]
            for k in range(j):
                v = cohort.marker[i, k]
                row.append("" if np.isnan(v) else repr(float(v)))
            row.append(int(cohort.event[i]))
            row.append(repr(float(cohort.event_time[i])))
            writer.writerow(row)


def _parse_cell(raw, row, column, kind):
    raw = raw.strip()
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise IngestionError(f"expected an integer, got {raw!r}", row=row, column=column)
    try:
        return float(raw)
    except ValueError:
        raise IngestionError(f"expected a number, got {raw!r}", row=row, column=column)


def read_wide_csv(path, scenario_tag=""):
    """Read a wide-format cohort CSV written by :func:`write_wide_csv`.

    Any column set of the form id,female,older,h1..hJ,event,time is
    accepted; J is inferred from the header.  Empty marker fields mean
    missing.  Raises :class:`IngestionError` with row and column context
    on malformed input.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path} is empty")
        header = [h.strip() for h in header]
        marker_cols = [h for h in header if h.startswith("h") and h[1:].isdigit()]
        expected_markers = [f"h{k}" for k in range(1, len(marker_cols) + 1)]
        expected = ["id", "female", "older"] + expected_markers + ["event", "time"]
        if header != expected or not marker_cols:
            raise IngestionError(
                f"header must be id,female,older,h1..hJ,event,time; got {','.join(header)}"
            )
        n_periods = len(marker_cols)
        ids, female, older, event, time = [], [], [], [], []
        marker_rows = []
        for lineno, fields in enumerate(reader, start=2):
            if not fields or all(not f.strip() for f in fields):
                continue
            if len(fields) != len(header):
                raise IngestionError(
                    f"expected {len(header)} fields, got {len(fields)}", row=lineno
                )
            ids.append(_parse_cell(fields[0], lineno, "id", "int"))
            female.append(_parse_cell(fields[1], lineno, "female", "int"))
            older.append(_parse_cell(fields[2], lineno, "older", "int"))
            row_marker = []
            for k in range(n_periods):
                raw = fields[3 + k].strip()
                if raw == "":
                    row_marker.append(np.nan)
                else:
                    row_marker.append(_parse_cell(raw, lineno, f"h{k + 1}", "float"))
            marker_rows.append(row_marker)
            event.append(_parse_cell(fields[3 + n_periods], lineno, "event", "int"))
            time.append(_parse_cell(fields[4 + n_periods], lineno, "time", "float"))
    if not ids:
        raise IngestionError(f"{path} contains no subject rows")
    marker = np.asarray(marker_rows, dtype=float)
    event = np.asarray(event, dtype=int)
    time = np.asarray(time, dtype=float)
    try:
        return CohortDataset(
            grid=PeriodGrid(n_periods),
            subject_ids=np.asarray(ids, dtype=int),
            female=np.asarray(female, dtype=int),
            older=np.asarray(older, dtype=int),
            marker=marker,
            observed=~np.isnan(marker),
            event=event,
            event_time=time,
            event_period=np.ceil(time).astype(int),
            scenario_tag=scenario_tag,
        )
    except ValueError as exc:
        raise IngestionError(str(exc)) from exc
