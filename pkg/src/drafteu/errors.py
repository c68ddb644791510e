"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class TrainingError(RuntimeError):
    """Raised when a trainer produces a non-finite loss.

    Attributes:
        step: index of the optimization step at which the loss diverged.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class UndefinedCorrelationError(ValueError):
    """Raised when a correlation is requested for zero-variance data."""


class UndefinedMetricError(ValueError):
    """Raised when a metric is undefined for the given labels (e.g. one class)."""
