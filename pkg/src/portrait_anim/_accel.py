"""Kernel backend selection.

Hot rasterization loops ship in two flavours: a numba ``@njit`` loop kernel and
a vectorized numpy kernel. ``PORTRAIT_ANIM_NUMBA=0`` forces the numpy path;
anything else uses numba when it is importable.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

JIT_OPTIONS = {"nogil": True, "cache": True}


def numba_enabled():
    if numba is None:
        return False
    return os.environ.get("PORTRAIT_ANIM_NUMBA", "1").strip() not in ("0", "false", "no", "off")


def njit(fn):
    """Compile ``fn`` with numba if available, else return it untouched."""
    if numba is None:  # pragma: no cover
        return fn
    return numba.njit(**JIT_OPTIONS)(fn)
