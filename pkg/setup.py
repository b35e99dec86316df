"""Build hook for the optional compiled kernel.

The package works without it; ``mvgame.kernels`` falls back to numpy when
``mvgame._ckernels`` cannot be imported.
"""
import os

from setuptools import setup


def extensions():
    if os.environ.get("MVGAME_NO_EXT"):
        return []
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        return []
    from setuptools import Extension
    ext = Extension("mvgame._ckernels", ["src/mvgame/_ckernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"])
    return cythonize([ext], language_level=3, quiet=True)


setup(ext_modules=extensions())
