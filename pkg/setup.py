import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; songlm.kernels falls back to numpy
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("SONGLM_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "songlm._kernels",
                ["src/songlm/_kernels.pyx"],
                include_dirs=[np.get_include()],
                # no FMA contraction: reductions must round exactly like the numpy fallback
                extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
            )
        ],
        compiler_directives={"language_level": 3},
    )

setup(ext_modules=ext_modules)
