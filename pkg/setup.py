#!/usr/bin/env python
import sys

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
    import numpy as np
except ImportError:
    # The package falls back to scipy when the kernel is not compiled
    cythonize = None

extensions = []
if cythonize is not None:
    extensions = [
        Extension(
            name="gshdl.core.kernels",
            sources=["gshdl/core/kernels.pyx"],
            include_dirs=[np.get_include()],
            extra_compile_args=["-O3"],
        ),
    ]

    # Windows-specific compiler flags
    if sys.platform == "win32":
        for e in extensions:
            e.extra_compile_args = ["/O2"]

    extensions = cythonize(
        extensions,
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "embedsignature": True,
            "initializedcheck": False,
            "nonecheck": False,
        },
    )

setup(ext_modules=extensions)
