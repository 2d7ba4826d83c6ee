"""Build script for the optional compiled kernels.

The Cython extension ``dualbell.grid._kernels`` is built when Cython and a C
compiler are available; otherwise the package installs without it and the
numpy fallback is used at import time.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("DUALBELL_NO_EXTENSION"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("dualbell.grid._kernels", ["src/dualbell/grid/_kernels.pyx"],
                       include_dirs=[np.get_include()],
                       extra_compile_args=["-O3"])],
            compiler_directives={"language_level": "3", "boundscheck": False,
                                 "wraparound": False, "cdivision": True},
        )
    except Exception as exc:  # pragma: no cover - build environment dependent
        print(f"warning: compiled kernels not built ({exc}); using the numpy fallback")

setup(ext_modules=ext_modules)
