"""Exception hierarchy shared across the package."""


class HetivError(Exception):
    """Base class for all package errors."""


class ConfigError(HetivError):
    """Invalid or contradictory run configuration."""


class DataError(HetivError):
    """Input data violates a precondition (missing file, bad schema, bad weights)."""


class EstimationError(HetivError):
    """An estimation step cannot proceed (rank failure, degenerate instruments)."""


class SingularMatrixError(EstimationError):
    """A matrix that must be invertible is singular within tolerance."""
