"""Exception types shared across the package."""


class SoftGMError(Exception):
    """Base class for all package errors."""


class ConfigError(SoftGMError, ValueError):
    """Invalid configuration or parameters."""


class InputError(SoftGMError, ValueError):
    """Invalid runtime input (for example NaN actions)."""


class ShapeError(SoftGMError, ValueError):
    """Operands of a tensor operation have incompatible shapes."""


class CheckpointError(SoftGMError):
    """A checkpoint cannot be loaded or does not match the requested configuration."""


class NumericalError(SoftGMError, FloatingPointError):
    """A computation produced NaN or infinite values."""
