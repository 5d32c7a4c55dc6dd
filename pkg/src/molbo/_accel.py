"""JIT switch for the hot numeric kernels.

Set ``MOLBO_DISABLE_NUMBA=1`` to force the pure-numpy fallbacks (also used
automatically when numba is not importable).
"""

import os

_FALSY = {"", "0", "false", "no", "off"}

DISABLED = os.environ.get("MOLBO_DISABLE_NUMBA", "0").strip().lower() not in _FALSY

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

USE_NUMBA = _numba is not None and not DISABLED

NUMBA_OPTS = {
    "nogil": True,
    "cache": True,
    "fastmath": False,
    "error_model": "numpy",
}


def njit(func):
    """Compile ``func`` with numba when enabled, otherwise return it unchanged."""
    if _numba is None:
        return func
    return _numba.njit(**NUMBA_OPTS)(func)
