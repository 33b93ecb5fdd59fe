import numpy as np
from setuptools import setup
from setuptools.extension import Extension

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "uttenc._kernels",
                ["src/uttenc/_kernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3", "-march=native", "-funroll-loops"],
            )
        ],
        language_level=3,
    )
except ImportError:
    # No Cython available: install pure-Python only, the numpy backend
    # is selected at import time.
    extensions = []

setup(ext_modules=extensions)
