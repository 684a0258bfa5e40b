"""Rater-specific multi-decoder Bayesian segmentation for inter-rater uncertainty."""
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
