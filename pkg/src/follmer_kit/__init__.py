"""Pathwise Foellmer calculus on sampled paths and bilinear evolution solvers."""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
