"""Exception types shared across the package."""


class BifuseError(Exception):
    """Base class for all package errors."""


class ConfigError(BifuseError):
    """Invalid or inconsistent configuration."""


class ShapeError(BifuseError):
    """Input tensor has an unusable shape (size, channels, divisibility)."""


class StructuralError(BifuseError):
    """Module wiring mismatch (level counts, channel widths)."""


class WeightLoadError(BifuseError):
    """Weight archive missing a tensor or carrying a wrong shape."""


class NumericsError(BifuseError):
    """Non-finite value encountered during training.

    ``tensor_name`` identifies the first offending tensor.
    """

    def __init__(self, message, tensor_name=None):
        super().__init__(message)
        self.tensor_name = tensor_name


class DataError(BifuseError):
    """Dataset layout or content problem."""
