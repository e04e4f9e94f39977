"""Desk-scale two-stage instance segmentation with a supervised semantic
attention module and a scale-complementary trident mask branch."""

__version__ = "0.1.0"

from .config import RunConfig, ConfigError
from .model import Model, build_model

__all__ = ["RunConfig", "ConfigError", "Model", "build_model", "__version__"]
