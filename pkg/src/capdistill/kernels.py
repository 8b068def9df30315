"""Backend selection for the convolution hot loops.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy fallback is used. Setting ``CAPDISTILL_PURE=1`` forces the fallback.
Both backends return bit-identical arrays.
"""
import os

from capdistill import _fallback

fallback_im2col = _fallback.im2col
fallback_col2im = _fallback.col2im

try:
    if os.environ.get("CAPDISTILL_PURE", "") not in ("", "0"):
        raise ImportError("compiled kernels disabled by CAPDISTILL_PURE")
    from capdistill import _kernels

    compiled_im2col = _kernels.im2col
    compiled_col2im = _kernels.col2im
    BACKEND = "cython"
except ImportError:
    compiled_im2col = compiled_col2im = None
    BACKEND = "numpy"

im2col = compiled_im2col or fallback_im2col
col2im = compiled_col2im or fallback_col2im


def use_backend(name):
    """Switch the active backend at runtime ("cython" or "numpy")."""
    global im2col, col2im, BACKEND
    if name == "cython":
        if compiled_im2col is None:
            raise RuntimeError("compiled kernels are not built")
        im2col, col2im = compiled_im2col, compiled_col2im
    elif name == "numpy":
        im2col, col2im = fallback_im2col, fallback_col2im
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name
