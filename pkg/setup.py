import os

import numpy as np
from setuptools import Extension, setup

# SPECTPROJ_NO_EXT=1 installs the pure-Python package only.
ext_modules = []
if not os.environ.get("SPECTPROJ_NO_EXT"):
    from Cython.Build import cythonize

    extensions = [
        Extension(
            "spectproj._kernels",
            ["src/spectproj/_kernels.pyx"],
            include_dirs=[np.get_include()],
            extra_compile_args=["-O3", "-fopenmp"],
            extra_link_args=["-fopenmp"],
        ),
        Extension(
            "spectproj._memhook",
            ["src/spectproj/_memhook.pyx"],
            include_dirs=[np.get_include()],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION"),
                           ("NPY_TARGET_VERSION", "NPY_1_22_API_VERSION")],
        ),
    ]
    ext_modules = cythonize(extensions, compiler_directives={"language_level": "3"})

setup(ext_modules=ext_modules)
