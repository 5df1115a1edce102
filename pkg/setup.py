"""Build the optional compiled kernels.

    python setup.py build_ext --inplace

Without a C compiler or Cython the package still installs and runs on the
numpy fallback.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("SNAPFIT_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "snapfit.snapnet._core",
                    ["src/snapfit/snapnet/_core.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
