"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension: recon.kernels falls
back to numpy implementations at import time. The extension only speeds up
the ragged pooling / scatter hot loops.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize

    ext = Extension(
        "recon.kernels._core",
        ["src/recon/kernels/_core.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    ext.optional = True  # build failure must not break a pure-python install
    ext_modules = cythonize([ext], compiler_directives={"language_level": "3"})
    for mod in ext_modules:
        mod.optional = True
except ImportError:
    pass

setup(ext_modules=ext_modules)
