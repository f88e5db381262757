"""Shared exception bases.

Concrete errors live next to the code that raises them; these bases exist
so callers (the CLI in particular) can map whole failure families to exit
codes without importing every module.
"""


class StratkitError(Exception):
    """Base class for all package errors."""


class ConfigError(StratkitError):
    """Invalid or inconsistent run configuration."""


class DataError(StratkitError):
    """Dataset ingestion or validation failure."""


class BackendError(StratkitError):
    """Prediction backend failure (transport, protocol, or exhaustion)."""


class DesignError(StratkitError):
    """Requested design cannot be constructed for the given units."""


class EstimationError(StratkitError):
    """Estimator preconditions violated."""


class InvalidProbability(StratkitError):
    """Allocation probability outside the open unit interval."""

    def __init__(self, p):
        self.p = p
        super().__init__(f"allocation probability must lie strictly between 0 and 1, got {p!r}")
