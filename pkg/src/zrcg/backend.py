"""Numba/NumPy backend selection.

Hot kernels in :mod:`zrcg.kernels` exist in two variants: a loop-oriented
implementation compiled with ``numba.njit`` and a vectorized pure-NumPy
fallback. Selection happens once at import time via ``ZRCG_NUMBA``:

* ``0``/``off``/``false`` - force the NumPy path everywhere;
* ``1``/``on``/``true``   - force the numba path everywhere (if importable);
* unset                   - per-kernel defaults: numba where the compiled
  loops measure faster (ranking, k-means assignment, pairwise entropy),
  NumPy where batched BLAS wins (the gated recurrence); see
  ``benchmarks/bench_kernels.py``.

Both paths compute the same quantities; they may differ in the last float
bits because summation order differs. Within one process the selection is
fixed, so training/evaluation stay bit-reproducible.
"""

import os

_FLAG = os.environ.get("ZRCG_NUMBA", "").strip().lower()

if _FLAG in ("0", "off", "false", "no"):
    NUMBA_AVAILABLE = False
else:
    try:
        import numba  # noqa: F401

        NUMBA_AVAILABLE = True
    except ImportError:  # pragma: no cover - numba is a hard dep, but stay graceful
        NUMBA_AVAILABLE = False

FORCE_NUMBA = NUMBA_AVAILABLE and _FLAG in ("1", "on", "true", "yes")
FORCE_NUMPY = not NUMBA_AVAILABLE

# Backwards-compatible alias: "is the numba path in use at all".
NUMBA_ENABLED = NUMBA_AVAILABLE


def jit(func):
    """Compile ``func`` with numba when available, else return it unchanged."""
    if NUMBA_AVAILABLE:
        from numba import njit

        return njit(cache=True)(func)
    return func


def select(numba_impl, numpy_impl, default="numba"):
    """Pick a kernel implementation under the global override rules."""
    if FORCE_NUMPY:
        return numpy_impl
    if FORCE_NUMBA:
        return numba_impl
    return numba_impl if default == "numba" else numpy_impl
