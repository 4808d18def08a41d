"""Backend selection for the hot kernels.

Kernels are compiled with numba when it is importable and not disabled via
``PFSEG_NUMBA=0``; otherwise the pure-numpy implementations in
:mod:`pfseg.kernels` are used.  Both paths produce identical results.
"""

import os

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return wrap


def numba_requested() -> bool:
    return os.environ.get("PFSEG_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = HAVE_NUMBA and numba_requested()


def worker_count() -> int:
    """Worker cap from ``PFSEG_THREADS``; 0 means serial conformance mode."""
    raw = os.environ.get("PFSEG_THREADS", "0").strip()
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"PFSEG_THREADS must be an integer, got {raw!r}") from None
    return max(n, 0)
