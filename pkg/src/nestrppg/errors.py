"""Exception hierarchy shared by all subpackages.

The three top-level families map onto the CLI exit codes: configuration
problems (2), data problems (3) and numeric failures (4).
"""


class NestError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(NestError, ValueError):
    pass


class DataError(NestError, ValueError):
    pass


class NumericError(NestError, ArithmeticError):
    pass


class ShapeError(ConfigError):
    pass


class NonFiniteError(NumericError):
    pass


class ZeroVectorError(NumericError):
    pass


class ZeroVarianceError(NumericError):
    pass


class BatchTooSmallError(ConfigError):
    pass


class DegenerateBatchError(NumericError):
    pass


class NoSpectralPeakError(NumericError):
    pass


class TooFewBeatsError(DataError):
    pass


class ConstantIBIError(NumericError):
    pass


class FormatError(DataError):
    """Malformed STMap file, checkpoint or manifest."""
