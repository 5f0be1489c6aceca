"""Exception types shared across the package."""


class BimacError(Exception):
    """Base class for all package errors."""


class DimensionError(BimacError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(BimacError, ValueError):
    """Invalid layer, network or run configuration."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonFiniteError(BimacError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class MetricError(BimacError, ValueError):
    """A quality metric is undefined for the given inputs."""


class StateError(BimacError, RuntimeError):
    """An operation was called in the wrong state (e.g. backward before forward)."""


class DataError(BimacError, OSError):
    """A data file is missing or malformed."""
