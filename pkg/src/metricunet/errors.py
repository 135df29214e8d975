"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class ValidationError(ValueError):
    """Raised when an argument or configuration value is out of its domain."""


class UndefinedMetricError(ArithmeticError):
    """Raised when a metric has no defined value (e.g. an empty mask)."""


class GenerationError(RuntimeError):
    """Raised when a synthetic scene cannot be realised inside its volume."""
