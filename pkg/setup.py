"""Build hook for the optional compiled kernels.

The extension is skipped when Cython is missing or MFCLAB_NO_EXT is set; the
package then runs on the pure-numpy fallback in ``mfclab._kernels_py``.
"""

import os

from setuptools import setup


def _extensions():
    if os.environ.get("MFCLAB_NO_EXT"):
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        return []
    ext = Extension(
        "mfclab._ext",
        ["src/mfclab/_ext.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
    )
    return cythonize(
        [ext],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )


setup(ext_modules=_extensions())
