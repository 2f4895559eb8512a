"""Exception types raised across the package."""


class BitBudgetError(Exception):
    """Base class for all package errors."""


class DimensionError(BitBudgetError, ValueError):
    pass


class ParameterError(BitBudgetError, ValueError):
    pass


class ConfigurationError(BitBudgetError, ValueError):
    pass


class InputError(BitBudgetError, ValueError):
    pass


class UsageError(BitBudgetError, RuntimeError):
    pass


class InfeasibleBudgetError(BitBudgetError, ValueError):
    pass


class ResourceError(BitBudgetError, RuntimeError):
    pass


class NumericalError(BitBudgetError, FloatingPointError):
    pass


class DivergenceError(NumericalError):
    """Training produced a non-finite loss; ``step`` names where."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class UndefinedCorrelationError(BitBudgetError, ValueError):
    pass


class IntegrityError(BitBudgetError, IOError):
    """An artifact does not match the hash recorded for it."""
