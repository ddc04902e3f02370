import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("ISA_FSS_NO_EXT", "") in ("", "0"):
    try:
        import numpy as np
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "isa_fss._kernels",
                    ["src/isa_fss/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # numpy fallback in isa_fss._kernels_py is selected at import time
        ext_modules = []

setup(ext_modules=ext_modules)
