from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python fallback is used at runtime
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension(
            "sparsefreeze._kernels",
            ["src/sparsefreeze/_kernels.pyx"],
            extra_compile_args=["-O3", "-ffp-contract=off"],
            optional=True,
        )],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
