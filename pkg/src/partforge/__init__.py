"""partforge: online 3D part-assembly data augmentation with EMD-based
cross-modal text/shape retrieval."""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
