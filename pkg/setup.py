import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

compile_args = ["-O3"]
link_args = []
if os.environ.get("VQLAB_NATIVE", "1") == "1":
    compile_args.append("-march=native")
if os.environ.get("VQLAB_OPENMP", "1") == "1":
    compile_args.append("-fopenmp")
    link_args.append("-fopenmp")

extensions = [
    Extension(
        "vqlab.kernels._ckernels",
        ["src/vqlab/kernels/_ckernels.pyx"],
        include_dirs=[np.get_include(), "src/vqlab/kernels"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=compile_args,
        extra_link_args=link_args,
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
