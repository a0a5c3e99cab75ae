"""Lifelong skill learning with shared-knowledge low-rank adapters on a toy sequence model."""
from .errors import CompatibilityError, CorruptionError, FormatError, LifeLoraError, NumericError, ShapeError, UsageError

__version__ = "0.1.0"

__all__ = [
    "CompatibilityError",
    "CorruptionError",
    "FormatError",
    "LifeLoraError",
    "NumericError",
    "ShapeError",
    "UsageError",
]
