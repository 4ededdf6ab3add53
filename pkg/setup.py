"""Build script for the optional compiled kernel.

The compiled extension accelerates the PRNG and proof-of-work search.
It is strictly optional: if Cython or OpenSSL headers are missing the
package installs anyway and falls back to the pure-Python kernels.
"""

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize
    from setuptools import Extension

    ext = Extension(
        "datchain._kernels_cy",
        ["src/datchain/_kernels_cy.pyx"],
        libraries=["crypto"],
        extra_compile_args=["-O3"],
        optional=True,
    )
    ext_modules = cythonize([ext], compiler_directives={"language_level": "3"})
except ImportError:
    pass

setup(ext_modules=ext_modules)
