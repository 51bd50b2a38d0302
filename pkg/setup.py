import os

from setuptools import setup

ext_modules = []
if os.environ.get("RECKNOW_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "recknow._kernels",
                    ["src/recknow/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except Exception as exc:  # build without the compiled core
        print(f"warning: skipping compiled kernels ({exc})")
        ext_modules = []

setup(ext_modules=ext_modules)
