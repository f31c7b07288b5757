"""Exception hierarchy.

DataError / ConfigError map to CLI exit code 2 (bad inputs or configuration);
NumericalError and its subclasses map to exit code 3.
"""

from __future__ import annotations


class LatknockError(Exception):
    """Base class for all package errors."""


class DataError(LatknockError):
    """Invalid or inconsistent input data."""


class ConfigError(LatknockError):
    """Invalid configuration (files, flags, presets)."""


class NumericalError(LatknockError):
    """A numerical procedure failed (divergence, rank deficiency, ...)."""


class FitDivergenceError(NumericalError):
    """An iterative fit diverged; carries diagnostics."""

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class RankDeficiencyError(NumericalError):
    """Design matrix is rank deficient; names the offending columns."""

    def __init__(self, message: str, columns=None):
        super().__init__(message)
        self.columns = list(columns) if columns is not None else []
