"""Exception types shared across the package."""


class AbmCalError(Exception):
    """Base class for package errors."""


class ConfigurationError(AbmCalError, ValueError):
    """An input configuration violates its contract.

    ``field`` names the offending field.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DomainError(AbmCalError, ValueError):
    """An argument lies outside the domain of a function."""


class NumericalError(AbmCalError, ArithmeticError):
    """A numerical routine failed (factorization, non-finite loss, ...)."""


class CalibrationError(AbmCalError, RuntimeError):
    """A calibration step cannot continue."""
