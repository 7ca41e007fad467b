"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid experiment or grid configuration."""


class SolverError(RuntimeError):
    """An iterative or direct solve failed to deliver a usable answer."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class BasisError(RuntimeError):
    """The reduced basis is rank deficient or otherwise corrupted."""
