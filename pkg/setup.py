import numpy as np
from setuptools import setup, Extension

# The compiled scan kernel is optional: without Cython (or on build failure)
# the package falls back to the pure-numpy kernel at import time.
try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "emgse._kernels._scan_cy",
                ["src/emgse/_kernels/_scan_cy.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
