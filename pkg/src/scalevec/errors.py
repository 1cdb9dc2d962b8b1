"""Exception hierarchy shared by all scalevec modules."""


class ScalevecError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(ScalevecError, ValueError):
    """Invalid configuration or inconsistent shapes."""


class InputError(ScalevecError, ValueError):
    """Invalid data passed to an operation (e.g. label out of range)."""


class UsageError(ScalevecError, RuntimeError):
    """An API was called in a state where it cannot work."""


class NumericError(ScalevecError, ArithmeticError):
    """A computation produced NaN or Inf from finite inputs."""


class DivergenceError(NumericError):
    """Training loss became non-finite."""


class PreconditionError(ScalevecError, ValueError):
    """A documented precondition of a check was violated."""


class ParseError(ScalevecError, ValueError):
    """Malformed binary input. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ChecksumError(ParseError):
    """CRC32 mismatch in a fold or checkpoint file."""
