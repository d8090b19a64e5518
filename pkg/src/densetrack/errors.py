"""Exception hierarchy shared by every stage of the toolkit."""


class DenseTrackError(Exception):
    """Base class; ``exit_code`` is what the CLI returns when this escapes."""

    exit_code = 3


class ConfigError(DenseTrackError, ValueError):
    exit_code = 2


class LoadError(DenseTrackError):
    pass


class AnnotationError(LoadError):
    pass


class OrderingError(DenseTrackError):
    pass


class RangeError(DenseTrackError, ValueError):
    pass


class SizeError(DenseTrackError, ValueError):
    pass


class ShapeError(DenseTrackError, ValueError):
    pass


class WarpError(DenseTrackError):
    pass


class ParameterError(DenseTrackError, ValueError):
    pass


class SessionError(DenseTrackError):
    pass


class CoverageError(DenseTrackError):
    pass


class NumericError(DenseTrackError, FloatingPointError):
    exit_code = 4
