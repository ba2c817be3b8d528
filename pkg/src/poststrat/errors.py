"""Exception types shared across the package."""


class PoststratError(Exception):
    """Base class for all package errors."""


class SchemaError(PoststratError):
    """A factor, level, column, or term does not match the declared schema."""


class DataError(PoststratError):
    """Input values violate a contract (counts, weights, outcomes, margins keys)."""


class EmptyCellError(DataError):
    """A populated cell has no sampled respondents where the estimator needs one."""


class MarginError(DataError):
    """Margin targets are mutually inconsistent or unattainable given the seed."""


class RankDeficiencyError(PoststratError):
    """A design matrix is perfectly collinear."""


class ConvergenceError(PoststratError):
    """An iterative procedure failed to converge; carries the best iterate."""

    def __init__(self, message, best=None, diagnostics=None):
        super().__init__(message)
        self.best = best
        self.diagnostics = diagnostics


class StructureError(PoststratError):
    """A weight vector is inconsistent with the cell structure it claims to follow."""


class ConfigError(PoststratError):
    """A run configuration is invalid (CLI / config files)."""
