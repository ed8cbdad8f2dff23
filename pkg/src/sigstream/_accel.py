"""Optional numba acceleration.

Set ``SIGSTREAM_DISABLE_NUMBA=1`` before import to force the pure-numpy
kernels. When numba is not installed the numpy path is used silently.
"""

import os

_disabled = os.environ.get("SIGSTREAM_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    if _disabled:
        raise ImportError
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(fn):
            return fn

        return wrap


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"
