"""Numba switch.

Kernels in :mod:`tracegraph.kernels` come in two flavours, a plain numpy
version and an ``@njit`` loop version. The loop version is used when numba
imports cleanly and ``TRACEGRAPH_DISABLE_NUMBA`` is unset (or ``0``).
"""

import os

_flag = os.environ.get("TRACEGRAPH_DISABLE_NUMBA", "").strip().lower()
DISABLED_BY_ENV = _flag not in ("", "0", "false", "no")

try:
    import numba as _nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    _nb = None

NUMBA_AVAILABLE = _nb is not None
USE_NUMBA = NUMBA_AVAILABLE and not DISABLED_BY_ENV


def njit(fn):
    """Compile ``fn`` with numba when available, else return it untouched.

    Compilation happens regardless of ``USE_NUMBA`` so tests and the
    benchmark can compare both paths in one process. fastmath stays off:
    results must match the numpy path summation order.
    """
    if _nb is None:
        return fn
    return _nb.njit(cache=True, fastmath=False)(fn)
