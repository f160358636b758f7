"""Build the optional Cython kernels.

If Cython or a C compiler is missing the extension is skipped and the
package falls back to ``manyiv._kernels_py`` at import time.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "manyiv._kernels",
                ["src/manyiv/_kernels.pyx"],
                extra_compile_args=["-O2"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
