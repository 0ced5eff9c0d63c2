from setuptools import setup, Extension

# The compiled codec is an optimization, not a requirement: when Cython (or a
# C compiler) is unavailable the package falls back to the pure-Python codec
# selected at import time in streamshuffle.rows.
try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

if cythonize is None:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "streamshuffle._ckernels",
                ["src/streamshuffle/_ckernels.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
