"""Exception hierarchy shared by every qprune module."""


class QPruneError(Exception):
    """Base class for all errors raised by qprune."""


class FormatError(QPruneError, ValueError):
    """A file does not conform to the expected on-disk format."""


class TruncatedFileError(QPruneError, OSError):
    """A tensor file ended before its declared payload."""


class ValidationError(QPruneError, ValueError):
    """Values are well-formed but violate a content invariant (NaN, non-binary mask, ...)."""


class ShapeError(QPruneError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(QPruneError, ValueError):
    """Invalid or inconsistent configuration."""


class EmptyCalibrationError(QPruneError):
    """A Hessian was requested before any calibration data was seen."""


class SingularError(QPruneError):
    """A factorization failed even after extra damping."""
