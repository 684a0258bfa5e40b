import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "multirater._ckernels",
        ["src/multirater/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
]

# the package still works without the extension, via the numpy fallback
optional = os.environ.get("MULTIRATER_REQUIRE_EXT", "") in ("", "0")
for ext in extensions:
    ext.optional = optional

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
