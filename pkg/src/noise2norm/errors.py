"""Exception types raised across the package."""


class Noise2NormError(Exception):
    """Base class for all package errors."""


class ShapeError(Noise2NormError, ValueError):
    pass


class InvalidArgumentError(Noise2NormError, ValueError):
    pass


class InvalidStateError(Noise2NormError, RuntimeError):
    pass


class NonFiniteError(Noise2NormError, FloatingPointError):
    """A tensor operation produced NaN or Inf."""


class DatasetError(Noise2NormError):
    pass


class CheckpointError(Noise2NormError):
    pass


class ConfigError(Noise2NormError, ValueError):
    pass
