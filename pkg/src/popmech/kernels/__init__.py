"""Hot numeric kernels with a numba path and a numpy/scipy fallback.

The numba implementations are used when numba imports and the environment
variable ``POPMECH_DISABLE_NUMBA`` is unset or ``0``.  Both implementations
stay importable (``numpy_impl`` / ``numba_impl``) so tests and the benchmark
can compare them directly.
"""
import os

from . import _numpy as numpy_impl

try:
    from . import _numba as numba_impl
except ImportError:  # pragma: no cover - numba missing
    numba_impl = None

_disabled = os.environ.get("POPMECH_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")

if numba_impl is not None and not _disabled:
    _impl = numba_impl
    BACKEND = "numba"
else:
    _impl = numpy_impl
    BACKEND = "numpy"

# numpy's SIMD exp beats numba's scalar libm exp for the row log-sum-exp (no SVML in the
# default numba install), and scipy's compiled assignment solver beats the jitted one, so
# both stay on the fallback; benchmarks/bench_kernels.py times every pair.
softmin = numpy_impl.softmin
assignment = numpy_impl.assignment
boids_accel = _impl.boids_accel

__all__ = ["BACKEND", "softmin", "assignment", "boids_accel", "numpy_impl", "numba_impl"]
