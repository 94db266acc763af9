"""Numba switch.

Set ``ADHOCSE_DISABLE_NUMBA=1`` to force the pure-numpy kernels. The flag is
read once at import time; ``use_numba(False)`` flips it at runtime (used by the
benchmark and by tests comparing both paths).
"""
import os

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_enabled = HAVE_NUMBA and os.environ.get("ADHOCSE_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def numba_enabled():
    return _enabled


def use_numba(flag=True):
    """Enable or disable the jitted kernels; returns the previous setting."""
    global _enabled
    prev = _enabled
    _enabled = bool(flag) and HAVE_NUMBA
    return prev


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity decorator otherwise."""
    if HAVE_NUMBA:
        return numba.njit(*args, cache=True, **kwargs)
    if len(args) == 1 and callable(args[0]):
        return args[0]
    return lambda f: f
