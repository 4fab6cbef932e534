"""Exception hierarchy shared by all modules."""


class MtmpcError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(MtmpcError, ValueError):
    """Shapes or values passed to an operation are inconsistent."""


class ConfigurationError(MtmpcError, ValueError):
    """A study, plant or model configuration is malformed or inconsistent."""


class NumericError(MtmpcError, ArithmeticError):
    """A numerical routine produced an unusable intermediate."""


class NumericOverflowError(NumericError):
    """Integration produced a non-finite state."""


class SolverFailure(NumericError):
    """The SQP solver could not produce a finite iterate.

    ``last_iterate`` carries the last finite ``(states, inputs)`` pair.
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class OptimizationFailed(NumericError):
    """Every restart of a hyperparameter optimization diverged."""

    def __init__(self, message, traces=None):
        super().__init__(message)
        self.traces = traces or []
