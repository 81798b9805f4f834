"""Backend selection for the numeric kernels.

Set ``ABM_CAL_DISABLE_JIT=1`` to run every kernel through its pure-numpy
path. ``ABM_CAL_THREADS`` caps the numba worker count.
"""

from __future__ import annotations

import os
import warnings

_FALSY = {"", "0", "false", "no", "off"}


def _flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() not in _FALSY


warnings.filterwarnings("ignore", message="The TBB threading layer requires")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _flag("ABM_CAL_DISABLE_JIT")


def njit(*args, **kwargs):
    """``numba.njit`` when the JIT path is active, identity otherwise."""
    if not USE_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def configure_threads() -> int:
    """Apply ``ABM_CAL_THREADS`` to numba and return the active worker count."""
    if not USE_NUMBA:
        return 1
    limit = numba.config.NUMBA_NUM_THREADS
    raw = os.environ.get("ABM_CAL_THREADS", "").strip()
    if raw:
        try:
            limit = max(1, min(int(raw), limit))
        except ValueError:
            pass
    numba.set_num_threads(limit)
    return limit
