"""Build script for the compiled attention kernels.

The package works without the extension (a pure-numpy fallback is selected at
import time), but the compiled kernels give much cleaner wall-clock scaling in
the benchmark, so we build them by default.
"""

import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "hubworld._kernels",
        sources=["src/hubworld/_kernels.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
