"""Build script: compiles the optional fast convolution kernels.

The package works without the extension (a NumPy fallback is selected at
import time), so a failed compile only costs speed.
"""

import warnings

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "drogsure._kernels._convfast",
                ["src/drogsure/_kernels/_convfast.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:  # no Cython: install the pure NumPy build
    warnings.warn("Cython not available; installing without compiled kernels")
    extensions = []

setup(ext_modules=extensions)
