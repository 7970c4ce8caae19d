"""Satellite-map fusion for HD map construction at desk scale."""
from satfuse.kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
