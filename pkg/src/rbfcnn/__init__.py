"""RBF reconstruction front-end for CNN classifiers, with attacks and certification."""

from ._backend import NAME as BACKEND
from .rbf import FilterBank, em_fit
from .reconstruction import ReconstructionConfig, reconstruct_image, surrogate_reconstruct

__version__ = "0.1.0"

__all__ = ["BACKEND", "FilterBank", "ReconstructionConfig", "em_fit", "reconstruct_image",
           "surrogate_reconstruct", "__version__"]
