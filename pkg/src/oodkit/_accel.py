"""numba switch.

Kernels are compiled with ``numba.njit`` when numba imports and the
environment variable ``OODKIT_DISABLE_NUMBA`` is unset (or ``0``). Otherwise
the pure-numpy versions in :mod:`oodkit.kernels` are used. The flag is read
once at import time.
"""

import os

_flag = os.environ.get("OODKIT_DISABLE_NUMBA", "0").strip().lower()
NUMBA_REQUESTED = _flag in ("", "0", "false", "no")

try:
    if not NUMBA_REQUESTED:
        raise ImportError("disabled by OODKIT_DISABLE_NUMBA")
    import numba

    HAS_NUMBA = True
except ImportError:
    numba = None
    HAS_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAS_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f
