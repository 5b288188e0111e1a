"""Build the optional Cython kernels.

The package works without them: ``brl.kernels`` falls back to the
pure-Python implementations when the extension is missing.
"""
import os

import numpy as np
from setuptools import Extension, setup

extensions = []
if os.environ.get("BRL_NO_EXT", "") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:  # pragma: no cover - cython is a build requirement
        cythonize = None
    if cythonize is not None:
        extensions = cythonize(
            [
                Extension(
                    "brl._kernels",
                    ["src/brl/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=extensions)
