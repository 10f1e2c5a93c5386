"""Single-branch (CoBraR) and two-branch (DeepMF) collaborative filtering."""
from cobrar.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
