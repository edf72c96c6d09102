"""Build script: compiles the optional fast-kernel extension.

The package works without the extension (pure-numpy fallback is selected
at import time), so a failed compile only costs speed.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "knowsurv._kernels._core",
                ["src/knowsurv/_kernels/_core.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level="3",
    )
except ImportError:
    print("Cython or numpy unavailable at build time; skipping compiled kernels")

setup(ext_modules=ext_modules)
