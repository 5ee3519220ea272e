"""Build script: compiles the optional kernel extension.

The extension is a speedup, not a requirement; if Cython or a C compiler
is unavailable the build falls back to the pure-Python kernels selected at
import time. -ffp-contract=off keeps the compiled arithmetic bit-identical
to the pure-Python twin (no fused multiply-add).
"""

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # missing compiler / headers
            print(f"warning: kernel extension build skipped ({exc}); "
                  f"pure-Python fallback will be used")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: building {ext.name} failed ({exc}); "
                  f"pure-Python fallback will be used")


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "relayserve._kernels_cy",
        ["src/relayserve/_kernels_cy.pyx"],
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extensions(), cmdclass={"build_ext": optional_build_ext})
