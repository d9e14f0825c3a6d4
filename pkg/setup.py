"""Builds the optional compiled search kernels.

The package is fully functional without the extension (a NumPy fallback is
selected at import time); a failed compile therefore must not fail the
install.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize

    ext = Extension(
        "knnmt._kernels._kernels_cy",
        ["src/knnmt/_kernels/_kernels_cy.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        optional=True,
    )
    ext_modules = cythonize([ext], compiler_directives={"language_level": "3"})
except ImportError:
    import warnings

    warnings.warn("Cython/numpy unavailable at build time; building without compiled kernels")

setup(ext_modules=ext_modules)
