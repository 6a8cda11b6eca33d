from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-python install; _backend falls back to numpy kernels
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension("statetune._ckernels", ["src/statetune/_ckernels.pyx"],
                   extra_compile_args=["-O3"], optional=True)],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
