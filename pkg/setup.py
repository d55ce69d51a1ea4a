"""Builds the compiled kernel extension.

The package works without it (a numpy fallback is selected at import time),
but the compiled kernels make conv2d and bilinear-resampling backward passes
several times faster. Build in place with:

    python setup.py build_ext --inplace
"""

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extensions = []
if cythonize is not None:
    extensions = cythonize(
        [
            Extension(
                "tunet.kernels._native",
                ["src/tunet/kernels/_native.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=extensions)
