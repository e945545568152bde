import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popmech import kernels
from popmech.kernels import numba_impl, numpy_impl

needs_numba = pytest.mark.skipif(numba_impl is None, reason="numba not installed")


@needs_numba
@settings(max_examples=30)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 12), m=st.integers(1, 12), eps=st.floats(1e-3, 10.0))
def test_softmin_backends_agree(seed, n, m, eps):
    rng = np.random.default_rng(seed)
    C, h = rng.random((n, m)) * 4, rng.normal(size=m)
    np.testing.assert_allclose(numba_impl.softmin(C, h, eps), numpy_impl.softmin(C, h, eps), rtol=1e-12, atol=1e-12)


def test_softmin_handles_large_costs():
    C = np.array([[1e6, 0.0], [1e6, 1e6]])
    out = numpy_impl.softmin(C, np.zeros(2), 1e-3)
    assert np.all(np.isfinite(out))
    assert out[1] == pytest.approx(1e6 - 1e-3 * np.log(2), rel=1e-14)


@needs_numba
@settings(max_examples=30)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 15), extra=st.integers(0, 4))
def test_assignment_backends_reach_the_same_cost(seed, n, extra):
    rng = np.random.default_rng(seed)
    C = rng.random((n, n + extra))
    a, b = numba_impl.assignment(C), numpy_impl.assignment(C)
    assert len(set(a.tolist())) == n == len(set(b.tolist()))
    rows = np.arange(n)
    assert C[rows, a].sum() == pytest.approx(C[rows, b].sum(), abs=1e-12)


@needs_numba
@pytest.mark.parametrize("seed", range(5))
def test_boids_backends_agree(seed):
    rng = np.random.default_rng(seed)
    X, V = rng.normal(size=(60, 2)) * 3, rng.normal(size=(60, 2))
    X[1] = X[0]  # coincident agents contribute no separation direction
    args = (0.3, 1.0, 0.1, 0.3, 0.005, 0.5, 5.0)
    np.testing.assert_allclose(numba_impl.boids_accel(X, V, *args), numpy_impl.boids_accel(X, V, *args),
                               rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("flag, expected", [("1", "numpy"), ("0", "numba" if numba_impl else "numpy")])
def test_disable_flag_selects_backend(flag, expected):
    env = dict(os.environ, POPMECH_DISABLE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", "from popmech import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected


def test_active_backend_matches_flag():
    flag = os.environ.get("POPMECH_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")
    assert kernels.BACKEND == ("numpy" if flag or numba_impl is None else "numba")
