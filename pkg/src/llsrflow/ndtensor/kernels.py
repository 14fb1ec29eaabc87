"""Backend selection for the conv hot loops.

The compiled extension is used when it imported cleanly, unless the
environment variable ``LLSRFLOW_PURE_PYTHON`` is set to a non-empty value.
"""

import os

from . import _kernels_py

BACKEND = "python"
im2col = _kernels_py.im2col
col2im = _kernels_py.col2im

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

if _ckernels is not None and not os.environ.get("LLSRFLOW_PURE_PYTHON"):
    BACKEND = "cython"
    im2col = _ckernels.im2col
    col2im = _ckernels.col2im


def available() -> list:
    return ["python"] + (["cython"] if _ckernels is not None else [])


class use_backend:
    """Temporarily switch the kernels used by ``conv2d`` (benchmarks, parity tests)."""

    def __init__(self, name: str):
        if name not in available():
            raise ValueError(f"backend {name!r} not available (have {available()})")
        self.name = name

    def __enter__(self):
        global BACKEND, im2col, col2im
        self._saved = (BACKEND, im2col, col2im)
        mod = _ckernels if self.name == "cython" else _kernels_py
        BACKEND, im2col, col2im = self.name, mod.im2col, mod.col2im
        return self

    def __exit__(self, *exc):
        global BACKEND, im2col, col2im
        BACKEND, im2col, col2im = self._saved
