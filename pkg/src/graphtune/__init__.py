"""Automatic configuration tuning for HNSW graph indexes."""
from .space import ConfigSpace, ParamConfig

__version__ = "0.1.0"

__all__ = ["ConfigSpace", "ParamConfig", "__version__"]
