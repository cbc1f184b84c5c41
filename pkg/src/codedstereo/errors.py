"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: usage/configuration problems exit 1,
bad input data exits 2, numerical failures exit 3.
"""


class CodedStereoError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CodedStereoError, ValueError):
    """Invalid or inconsistent configuration values."""


class UsageError(CodedStereoError, ValueError):
    """A function was called with arguments that violate its contract."""


class DomainError(CodedStereoError, ValueError):
    """A physical quantity lies outside the range the model supports."""


class ParseError(CodedStereoError, ValueError):
    """Malformed file contents."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(CodedStereoError):
    """Input data is missing, inconsistent or unusable."""


class NumericalError(CodedStereoError, ArithmeticError):
    """A computation produced non-finite values."""
