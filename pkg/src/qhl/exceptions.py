"""Exception hierarchy shared by every qhl module."""


class QHLError(Exception):
    """Base class for all errors raised by qhl."""


class DomainError(QHLError, ValueError):
    """An argument lies outside the domain of the function."""


class ValidationError(QHLError, ValueError):
    """Input data is malformed (unordered events, mismatched lengths, ...)."""


class ConfigurationError(QHLError, ValueError):
    """Parameters are individually valid but inconsistent with each other."""


class StabilityError(ConfigurationError):
    """The stability condition ||phi||_1 + ||k||_2^2 < 1 is violated."""


class UnsupportedKernelError(ConfigurationError):
    """The requested operation is not available for this kernel variant."""


class DivergenceError(QHLError, ValueError):
    """A requested kernel norm is infinite."""

    def __init__(self, message, norm=None):
        super().__init__(message)
        self.norm = norm


class AccuracyLossError(QHLError, ArithmeticError):
    """The requested accuracy could not be reached.

    ``achieved`` holds the best relative error bound that was obtained.
    """

    def __init__(self, message, achieved=float("nan")):
        super().__init__(message)
        self.achieved = achieved


class ExplosionError(QHLError, RuntimeError):
    """The simulation produced more events than the configured cap."""


class InsufficientDataError(QHLError, ValueError):
    """Not enough observations for the estimator."""


class UndefinedExponentError(QHLError, ValueError):
    """A regularity exponent cannot be estimated (e.g. constant path)."""
