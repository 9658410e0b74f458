import os

import numpy
from setuptools import Extension, setup

# Set COGFACTOR_NO_EXT=1 to build without the compiled kernels; the package
# then runs on the numpy fallback.
ext_modules = []
if not os.getenv("COGFACTOR_NO_EXT"):
    from Cython.Build import cythonize

    extensions = [
        Extension(
            name="cogfactor._kernels._core",
            sources=["src/cogfactor/_kernels/_core.pyx"],
            include_dirs=[numpy.get_include()],
            extra_compile_args=["-O3"],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        ),
    ]
    ext_modules = cythonize(
        extensions,
        language_level=3,
        compiler_directives={"boundscheck": False, "wraparound": False, "cdivision": True},
    )

setup(ext_modules=ext_modules)
