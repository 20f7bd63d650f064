"""Build the optional Cython kernels.

If Cython or a C compiler is unavailable the package installs without the
extension and falls back to the pure-Python kernels at import time.
"""
import os
import sys

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            sys.stderr.write(f"warning: skipping compiled kernels ({exc})\n")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            sys.stderr.write(f"warning: failed to build {ext.name} ({exc})\n")


def extensions():
    if os.environ.get("EQUIDIST_NO_EXT"):
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "equidist._kernels",
        ["src/equidist/_kernels.pyx"],
        include_dirs=[np.get_include()],
        # no -ffast-math: kernels must match the Python fallback bit for bit
        extra_compile_args=["-O2", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
