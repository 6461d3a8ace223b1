"""Numba / NumPy kernel backend selection.

Hot kernels ship in two variants: loop bodies compiled with ``numba.njit``
and vectorized pure-NumPy fallbacks.  The active variant is chosen once at
import time from the ``GEOPOSE_BACKEND`` environment variable:

    GEOPOSE_BACKEND=numba   force numba (error if not importable)
    GEOPOSE_BACKEND=numpy   force the pure-NumPy fallback
    (unset)                 numba when importable, NumPy otherwise

``benchmarks/bench_kernels.py`` compares the two paths.
"""

import os

_FLAG = os.environ.get("GEOPOSE_BACKEND", "").strip().lower()

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    numba = None
    HAS_NUMBA = False

if _FLAG == "numba" and not HAS_NUMBA:
    raise ImportError("GEOPOSE_BACKEND=numba but numba is not installed")

if _FLAG == "numpy":
    USE_NUMBA = False
elif _FLAG == "numba":
    USE_NUMBA = True
elif _FLAG == "":
    USE_NUMBA = HAS_NUMBA
else:
    raise ValueError(
        f"GEOPOSE_BACKEND={_FLAG!r} not understood (use 'numba' or 'numpy')"
    )


def njit(func):
    """Compile with a fixed configuration: no fastmath, no parallelism.

    Results must stay deterministic and bit-stable for a given backend,
    so reassociation and threading are deliberately off.
    """
    return numba.njit(cache=True, fastmath=False)(func)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
