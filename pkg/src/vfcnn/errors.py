"""Exception types shared across the toolkit."""


class VfcnnError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(VfcnnError, ValueError):
    """Raised when two tensors disagree along a named axis."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class ConfigurationError(VfcnnError, ValueError):
    """Raised for invalid hyperparameters or layer settings."""


class ShapePlanError(VfcnnError, ValueError):
    """Raised when an input volume is too small for the configured depth."""

    def __init__(self, message, minimum=None):
        super().__init__(message)
        self.minimum = minimum


class GradientError(VfcnnError, RuntimeError):
    """Raised when an optimizer or backward pass finds a missing gradient."""
