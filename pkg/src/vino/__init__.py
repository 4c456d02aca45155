"""Mask-conditioned self-distillation on toy videos, with LOST object discovery."""

from .errors import ConfigError, DataError, NumericError, VinoError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "NumericError", "VinoError", "__version__"]
