"""Build the optional compiled core; the package falls back to numpy without it."""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("LPSACTIVE_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("lpsactive._core", ["src/lpsactive/_core.pyx"],
                       include_dirs=[numpy.get_include()],
                       extra_compile_args=["-O3"],
                       define_macros=[("NPY_NO_DEPRECATED_API",
                                       "NPY_1_7_API_VERSION")])],
            language_level=3)
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
