"""Build the optional compiled kernels.

The Cython extension is optional: when Cython or a C compiler is missing the
package installs without it and ``causil._accel`` falls back to the pure
numpy kernels.
"""
import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("CAUSIL_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "causil._accel._ckernels",
                    ["src/causil/_accel/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
