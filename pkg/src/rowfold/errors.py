"""Exception types shared across the engine."""

from __future__ import annotations


class RowfoldError(Exception):
    """Base class for all engine errors."""


class ConfigError(RowfoldError):
    """Invalid configuration. Carries the offending key when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class DataError(RowfoldError):
    """Unusable input data: missing files, missing columns, zero usable rows."""


class EstimationError(RowfoldError):
    """A model could not be estimated from otherwise valid data."""


class RankDeficiencyError(EstimationError):
    """Design matrix is rank deficient. Names the collinear columns."""

    def __init__(self, columns: tuple[str, ...]):
        super().__init__(f"design matrix is rank deficient; collinear columns: {', '.join(columns)}")
        self.columns = tuple(columns)
