"""Exception hierarchy.

``ValidationError`` subclasses signal bad input or configuration (the CLI
exits with status 1); anything else, numeric faults and I/O included, is a
runtime fault (status 2).
"""

from .autodiff import ContractViolation, NumericFault


class TeraError(Exception):
    pass


class ValidationError(TeraError, ValueError):
    pass


class ConfigError(ValidationError):
    pass


class DataError(ValidationError):
    pass


class EmptyInputError(DataError):
    pass


class UnsupportedRateError(DataError):
    pass


class DegenerateSpeakerError(DataError):
    pass


class UtteranceTooShortError(DataError):
    pass


class FormatError(DataError):
    """A file could not be parsed (bad magic, truncation, malformed header)."""


class IncompatibleError(ValidationError):
    """Versions, feature kinds or dimensions do not line up."""


__all__ = [
    "ConfigError",
    "ContractViolation",
    "DataError",
    "DegenerateSpeakerError",
    "EmptyInputError",
    "FormatError",
    "IncompatibleError",
    "NumericFault",
    "TeraError",
    "UnsupportedRateError",
    "UtteranceTooShortError",
    "ValidationError",
]
