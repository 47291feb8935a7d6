"""Build hook for the optional compiled kernel extension.

The package is importable without the extension (the NumPy fallback is
selected at import time); when Cython and a C compiler are present the
compiled kernels are built and picked up automatically.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "minirank.kernels._ckernels",
                ["src/minirank/kernels/_ckernels.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
else:
    ext_modules = []

setup(ext_modules=ext_modules)
