"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class StateError(RuntimeError):
    """An object was used before the state it depends on exists."""


class ParseError(ValueError):
    """A binary dataset file is malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """An experiment configuration is invalid."""


class DegenerateChannelError(ValueError):
    """A channel has zero standard deviation and cannot be normalized."""


class UndefinedFractionError(ZeroDivisionError):
    """The noise fraction is undefined because the total error energy is zero."""


class TelemetryInvariantError(AssertionError):
    """A recorded step violated one of the error-energy invariants."""
