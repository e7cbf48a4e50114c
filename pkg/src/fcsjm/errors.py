"""Shared exception types."""

from __future__ import annotations

__all__ = ["IngestionError", "ImputationError", "FitError"]


class IngestionError(ValueError):
    """Raised when an input file cannot be parsed into a cohort.

    Carries enough context (row/column) to locate the offending cell.
    """

    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column


class ImputationError(RuntimeError):
    """Raised when chained-equations imputation cannot proceed."""


class FitError(RuntimeError):
    """Raised when a model fit fails or does not converge.

    The ``diagnostics`` dict carries the best parameter vector seen,
    its log-likelihood and gradient norm, and the iteration count.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
