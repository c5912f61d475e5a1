import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stochmono import _kernels_py, kernels

cython = pytest.importorskip("stochmono._kernels")


def test_backend_default():
    assert kernels.BACKEND == "cython"


def test_pure_python_switch():
    env = dict(os.environ, STOCHMONO_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from stochmono import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@given(P=st.integers(1, 4), nq=st.integers(1, 40), n=st.integers(1, 12), seed=st.integers(0, 2**32 - 1))
def test_weighted_gram_agrees(P, nq, n, seed):
    rng = np.random.default_rng(seed)
    basis = rng.standard_normal((nq, n))
    weights = rng.standard_normal((P, nq))
    weights[:, ::3] = 0.0  # exercise the skip branch
    np.testing.assert_allclose(cython.weighted_gram(basis, weights), _kernels_py.weighted_gram(basis, weights),
                               rtol=1e-12, atol=1e-12)


def test_weighted_gram_example():
    basis = np.array([[1.0, 0.0], [1.0, 2.0]])
    out = cython.weighted_gram(basis, np.array([[1.0, 3.0]]))
    np.testing.assert_array_equal(out[0], [[4.0, 6.0], [6.0, 12.0]])


@pytest.mark.parametrize("p", [2.0, 3.0, 4.0, 6.5])
@pytest.mark.parametrize("rows", [1, 5])
def test_power_flux_agrees(p, rows, rng):
    z = rng.standard_normal((5, 30))
    z[0, 0] = 0.0
    coef = rng.uniform(0.5, 2.0, (rows, 30))
    f_c, d_c = cython.power_flux(z, coef, p)
    f_p, d_p = _kernels_py.power_flux(z, coef, p)
    np.testing.assert_allclose(f_c, f_p, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(d_c, d_p, rtol=1e-13, atol=1e-15)


def test_power_flux_example():
    f, d = cython.power_flux(np.array([[2.0, -1.0]]), np.array([[1.0, 3.0]]), 4.0)
    np.testing.assert_array_equal(f, [[8.0, -3.0]])
    np.testing.assert_array_equal(d, [[12.0, 9.0]])


@pytest.mark.parametrize("p", [2.0, 3.5, 4.0])
def test_dispatch_power_flux(p, rng):
    z = np.ascontiguousarray(rng.standard_normal((3, 16)))
    coef = np.ones((1, 16))
    for got, want in zip(kernels.power_flux(z, coef, p), _kernels_py.power_flux(z, coef, p)):
        np.testing.assert_allclose(got, want, rtol=1e-13)
