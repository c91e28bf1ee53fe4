"""Builds the optional compiled kernel core.

The package works without it (numpy fallback is selected at import), so a
missing Cython or a failed compile must not break installation.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "sgtail.backend._core",
                ["src/sgtail/backend/_core.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
