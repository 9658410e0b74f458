"""Longitudinal cognitive factor model, risk prediction and trial power simulation."""
from ._kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
