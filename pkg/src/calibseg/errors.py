"""Exception types raised across the package."""


class CalibsegError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CalibsegError, ValueError):
    """Invalid parameters, configs, or batches that break the grouping rule."""


class ValidationError(CalibsegError, ValueError):
    """Input arrays that violate a data invariant (shape, binarity, range)."""


class DatasetError(CalibsegError, OSError):
    """A manifest or one of the files it references cannot be read."""


class TrainingError(CalibsegError, RuntimeError):
    """Raised when optimisation produces a non-finite loss term."""

    def __init__(self, message, term=None, epoch=None):
        super().__init__(message)
        self.term = term
        self.epoch = epoch
