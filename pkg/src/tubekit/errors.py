"""Exception types raised across the package."""


class TubekitError(Exception):
    """Base class for all package errors."""


class DimensionError(TubekitError, ValueError):
    pass


class NumericError(TubekitError, ArithmeticError):
    pass


class ParameterError(TubekitError, ValueError):
    pass


class UnsupportedScaleError(ParameterError):
    pass


class EmptySourceError(TubekitError, ValueError):
    """Distance transform requested with no source pixels."""


class UndefinedSurfaceError(TubekitError, ValueError):
    """A surface metric was requested on an empty mask."""


class DegenerateDatasetError(TubekitError, ValueError):
    pass


class FormatError(TubekitError, ValueError):
    """Malformed file (TBF1 tensor, manifest, config)."""
