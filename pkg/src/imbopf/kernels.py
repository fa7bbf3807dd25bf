"""Kernel dispatch: the compiled extension when built, numpy otherwise.

Set ``IMBOPF_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("IMBOPF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def _contiguous(fn):
    if _impl is _kernels_py:
        return fn

    def call(*args):
        # the compiled versions take C-contiguous float64 / int64 buffers
        return fn(*(np.ascontiguousarray(a) if isinstance(a, np.ndarray) else a for a in args))

    call.__name__ = fn.__name__
    call.__doc__ = getattr(_kernels_py, fn.__name__).__doc__
    return call


scatter_add = _contiguous(_impl.scatter_add)
bus_injection = _contiguous(_impl.bus_injection)
primal_damping = _contiguous(_impl.primal_damping)
dual_damping = _contiguous(_impl.dual_damping)

__all__ = ["BACKEND", "scatter_add", "bus_injection", "primal_damping", "dual_damping"]
