"""Multi-task scene-attribute recognition with mutual-information
regularization: shared encoder, per-task heads, JSD/NCE lower bounds,
procedural scene data, training and evaluation tooling."""

from ._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
