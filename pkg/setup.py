"""Build script: compiles the optional Cython Sinkhorn kernel.

If Cython or a C compiler is unavailable the package still installs;
partforge.kernels falls back to the pure-numpy implementation at import.
"""
from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "partforge.kernels._sinkhorn_cy",
                ["src/partforge/kernels/_sinkhorn_cy.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
