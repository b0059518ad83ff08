"""Backend selection for the convolution hot kernels.

The compiled Cython extension is preferred; the pure-numpy fallback is used
when the extension is missing or when ``MTLMI_PURE_PYTHON=1`` is set. Both
expose the same ``im2col`` / ``col2im`` contract, so callers never care which
one is active. ``BACKEND`` names the selected implementation.
"""

import os

if os.environ.get("MTLMI_PURE_PYTHON") == "1":
    from .fallback import BACKEND, col2im, im2col
else:
    try:
        from ._convkernels import BACKEND, col2im, im2col
    except ImportError:
        from .fallback import BACKEND, col2im, im2col

__all__ = ["BACKEND", "im2col", "col2im"]
