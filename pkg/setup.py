import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                f"phonsign.{name}",
                [f"src/phonsign/{name}.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
            for name in ("_scan_ext", "_gat_ext", "_ops_ext")
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
