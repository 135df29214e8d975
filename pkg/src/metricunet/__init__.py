"""Voxel-wise metric learning for low-contrast organ segmentation, on a numpy autodiff core."""
from .errors import DimensionError, GenerationError, UndefinedMetricError, ValidationError

__version__ = "0.1.0"

__all__ = ["DimensionError", "GenerationError", "UndefinedMetricError", "ValidationError", "__version__"]
