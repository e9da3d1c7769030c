"""Exception hierarchy shared across the package."""


class HistliftError(Exception):
    """Base class for all histlift errors."""


class ShapeError(HistliftError):
    """Operand shapes are incompatible."""


class ConfigError(HistliftError):
    """Invalid configuration, flag, or usage."""


class NumericError(HistliftError):
    """Non-finite values or a failed numeric precondition."""


class DataFormatError(HistliftError):
    """Base class for binary file format errors."""


class BadMagicError(DataFormatError):
    """File does not start with the expected magic bytes."""


class TruncatedError(DataFormatError):
    """File ended before the declared payload was read."""


class VersionError(DataFormatError):
    """File declares an unsupported format version."""
