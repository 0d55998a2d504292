import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("L2LESION_NO_EXT", "") in ("", "0"):
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:  # fallback kernels only
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "l2lesion._ckernels",
                    ["src/l2lesion/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    # no FMA contraction: keeps results bit-identical to numpy
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
