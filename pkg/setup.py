"""Build hook for the optional compiled kernel extension.

The package is fully functional without the extension (a numpy fallback is
selected at import time); the Cython module just makes the per-edge graph
kernels faster. Build failures are therefore non-fatal.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/graphteach/_accel/_fast.pyx",
        compiler_directives={"language_level": "3"},
    )
    for ext in ext_modules:
        ext.include_dirs.append(numpy.get_include())
except Exception as exc:  # pragma: no cover - depends on build env
    print(f"graphteach: skipping compiled kernels ({exc}); numpy fallback will be used")

setup(ext_modules=ext_modules)
