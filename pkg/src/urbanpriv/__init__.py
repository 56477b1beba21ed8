"""Privacy-preserving urban sensing primitives and desk-scale experiments."""

from .core import StateError, ValidationError

__version__ = "0.1.0"

__all__ = ["StateError", "ValidationError", "__version__"]
