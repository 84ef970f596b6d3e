"""Numba dispatch for the hot kernels.

Kernels compile with ``numba.njit`` when numba is importable. Setting the
environment variable ``RACER_DISABLE_NUMBA=1`` (read once at import) selects
the pure-numpy path everywhere, which is what the benchmark compares against.
"""

from __future__ import annotations

import os

_FLAG = os.environ.get("RACER_DISABLE_NUMBA", "").strip().lower()
NUMBA_DISABLED = _FLAG in {"1", "true", "yes", "on"}

try:  # pragma: no cover - depends on the environment
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not NUMBA_DISABLED


def jit(fn, cache=True):
    """Always-compiled variant (used by the benchmark); identity without numba."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=cache)(fn)


def njit(fn):
    """Compile ``fn`` when the numba path is active, otherwise return it unchanged."""
    if not USE_NUMBA:
        return fn
    return numba.njit(cache=True)(fn)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
