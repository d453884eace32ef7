import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension("ddro._ckernels", ["src/ddro/_ckernels.pyx"], include_dirs=[np.get_include()],
              extra_compile_args=["-O3", "-ffast-math"],
              libraries=["mvec", "m"]),
]

setup(ext_modules=cythonize(extensions, language_level=3))
