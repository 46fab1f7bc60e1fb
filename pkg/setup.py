import platform

from Cython.Build import cythonize
from setuptools import Extension, setup

extra_args = ["-O3"]
if platform.machine() in ("x86_64", "AMD64"):
    # The C core carries preprocessor guards so the AVX-512 path only
    # compiles where the target supports it; -march=native exposes it.
    extra_args.append("-march=native")

extensions = [
    Extension(
        "nestquant.kernels._core",
        sources=[
            "src/nestquant/kernels/_core.pyx",
            "src/nestquant/kernels/packed_kernels.c",
        ],
        include_dirs=["src/nestquant/kernels"],
        extra_compile_args=extra_args,
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
