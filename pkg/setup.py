import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# the ray marcher keeps strict IEEE semantics; the network kernels may reassociate
REASSOC = ["-fassociative-math", "-fno-signed-zeros", "-fno-trapping-math", "-fno-math-errno"]

extensions = [
    Extension(
        "voxelzip._ckernels",
        ["src/voxelzip/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
    ),
    Extension(
        "voxelzip._cnet",
        ["src/voxelzip/_cnet.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"] + REASSOC,
    ),
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
