"""Build script for the compiled kernel core.

The package works without the extension (a NumPy fallback is selected at
import time), but training is much faster with it. Build in place with:

    python setup.py build_ext --inplace
"""

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "stlth._core",
        sources=["src/stlth/_core.pyx"],
        include_dirs=[np.get_include(), "src/stlth"],
        depends=["src/stlth/_conv_kernels.h"],
        extra_compile_args=["-O3", "-march=native", "-funroll-loops"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
