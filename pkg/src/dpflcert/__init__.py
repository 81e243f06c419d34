"""Differentially private federated learning with certified robustness to poisoning."""

from .errors import (ConfigurationError, DomainError, DPFLError, FormatError, PatternError,
                     ShapeError, UsageError)

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "DomainError", "DPFLError", "FormatError", "PatternError",
           "ShapeError", "UsageError", "__version__"]
