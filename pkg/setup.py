"""Build script for the optional compiled kernels.

The Cython extension is best-effort: when Cython or a C compiler is missing
the package installs without it and ``jsmix.kernels`` falls back to numpy.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("JSMIX_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "jsmix._ckernels",
                    ["src/jsmix/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
