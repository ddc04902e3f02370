"""Backend selection for the conv2d hot loops (im2col / col2im).

The compiled Cython module is used when it was built; otherwise the numpy
implementation in ``_kernels_py`` is used. Setting ``ISA_FSS_PURE_PYTHON=1``
forces the fallback.
"""
import os

if os.environ.get("ISA_FSS_PURE_PYTHON", "") not in ("", "0"):
    from ._kernels_py import col2im, im2col

    BACKEND = "python"
else:
    try:
        from ._kernels import col2im, im2col

        BACKEND = "cython"
    except ImportError:
        from ._kernels_py import col2im, im2col

        BACKEND = "python"

__all__ = ["BACKEND", "col2im", "im2col"]
