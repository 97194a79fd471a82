"""Exception types shared across the package."""


class DafdError(Exception):
    """Base class for all errors raised by dafd."""


class ConfigurationError(DafdError, ValueError):
    """Invalid layer, optimizer or experiment settings."""


class ShapeError(DafdError, ValueError):
    """Tensor shapes do not line up."""


class DataError(DafdError, ValueError):
    """Input data is missing, malformed or inconsistent."""


class UsageError(DafdError, ValueError):
    """An API was called in a way it does not support."""


class TrainingError(DafdError, RuntimeError):
    """Training cannot proceed (missing gradients, NaN loss, ...)."""
