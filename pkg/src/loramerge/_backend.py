"""Selects the kernel implementation.

Numba-compiled kernels are used when numba imports cleanly, unless the
environment variable ``LORAMERGE_DISABLE_NUMBA`` is set to a truthy value, in
which case the vectorised numpy kernels are used instead.
"""
import os

_FALSY = ("", "0", "false", "no", "off")


def numba_requested():
    return os.environ.get("LORAMERGE_DISABLE_NUMBA", "").strip().lower() in _FALSY


def load_kernels():
    if numba_requested():
        try:
            from . import _numba_kernels as kernels
            return "numba", kernels
        except ImportError:
            pass
    from . import _numpy_kernels as kernels
    return "numpy", kernels


BACKEND, KERNELS = load_kernels()
