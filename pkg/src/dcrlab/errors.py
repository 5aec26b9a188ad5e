"""Exception types shared across the package."""


class DcrLabError(Exception):
    pass


class DimensionError(DcrLabError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(DcrLabError, ValueError):
    """A scalar argument is outside its valid range."""


class ConfigError(DcrLabError, ValueError):
    """A configuration key is missing, unknown, or has the wrong type."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class StateError(DcrLabError, RuntimeError):
    """An operation was called in the wrong order."""


class NumericError(DcrLabError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required.

    ``snapshot`` carries whatever diagnostic context the raiser had at hand.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class ProbeError(DcrLabError, ValueError):
    """A theory probe was built with an invalid bound."""
