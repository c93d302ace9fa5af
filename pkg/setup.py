import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("SPDE_DEEPSPLIT_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "spde_deepsplit._kernels",
                    ["src/spde_deepsplit/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3", "-march=native", "-fno-math-errno"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # numpy fallback is selected at import time
        ext_modules = []

setup(ext_modules=ext_modules)
