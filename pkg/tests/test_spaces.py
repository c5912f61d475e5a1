import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.polynomial.legendre import leggauss

from stochmono.spaces import (
    Family,
    build_space,
    c_b_ratio,
    cross_gram,
    dual_norm,
    embed,
    initial_coefficients,
    norms,
    project,
    spectral_c_b,
    v_norm,
)

PI2 = np.pi**2
FAMILIES = [(Family.SPECTRAL_SINE, 8), (Family.PIECEWISE_LINEAR_FE, 8)]


def gauss_integral(fn, pieces=64, points=10):
    """Composite Gauss-Legendre on (0, 1), independent of the package rules."""
    xg, wg = leggauss(points)
    total = 0.0
    for a in np.arange(pieces) / pieces:
        x = a + 0.5 / pieces * (xg + 1.0)
        total += 0.5 / pieces * np.sum(wg * fn(x))
    return total


# -- build_space examples ---------------------------------------------------------


def test_spectral_n1_cb():
    s = build_space("spectral", 1)
    assert s.dim == 1
    assert s.c_b == pytest.approx(1 + PI2, rel=1e-10)
    assert s.c_b == pytest.approx(10.8696, abs=1e-4)
    x = np.linspace(0, 1, 7)
    np.testing.assert_allclose(s.basis[0](x), np.sqrt(2) * np.sin(np.pi * x), atol=1e-14)


def test_spectral_n2_cb():
    assert build_space("spectral", 2).c_b == pytest.approx(2 + 5 * PI2, rel=1e-10)
    assert build_space("spectral", 2).c_b == pytest.approx(51.348, abs=1e-3)


def test_fe_n2_single_hat():
    s = build_space("fe", 2)
    assert s.dim == 1
    # orthonormalized hat: hat / |hat|_H with |hat|^2_H = 1/3, |hat'|^2_H = 4
    scale = np.sqrt(3.0)
    hat = lambda x: scale * np.clip(1 - np.abs(x - 0.5) / 0.5, 0, None)
    dhat = lambda x: scale * np.where(x < 0.5, 2.0, -2.0)
    brute = gauss_integral(lambda x: hat(x) ** 2 + dhat(x) ** 2, pieces=128)
    assert brute == pytest.approx(1 + 12.0, rel=1e-10)
    assert s.c_b == pytest.approx(brute, rel=1e-10)


@pytest.mark.parametrize("family,n", [("spectral", 1), ("spectral", 5), ("fe", 2), ("fe", 8), ("fe", 6)])
def test_gram_identity(family, n):
    s = build_space(family, n)
    np.testing.assert_allclose(s.gram(), np.eye(s.dim), atol=1e-10)


@pytest.mark.parametrize("family,n", [("spectral", 4), ("fe", 4)])
def test_basis_vanishes_at_endpoints(family, n):
    s = build_space(family, n)
    vals, _ = s.basis_values([0.0, 1.0])
    np.testing.assert_allclose(vals, 0.0, atol=1e-13)


def test_cb_matches_quadrature_of_vnorms():
    for fam, n in [("spectral", 6), ("fe", 16)]:
        s = build_space(fam, n)
        total = sum(
            gauss_integral(lambda x, b=b: b(x) ** 2 + b.derivative(x) ** 2, pieces=4 * n) for b in s.basis
        )
        assert s.c_b == pytest.approx(total, rel=1e-8)


def test_build_space_rejects_bad_input():
    with pytest.raises(ValueError):
        build_space("spectral", 0)
    with pytest.raises(ValueError):
        build_space("fe", 1)
    with pytest.raises(ValueError, match="too coarse"):
        build_space("spectral", 4, quadrature_order=3)
    with pytest.raises(ValueError, match="too coarse"):
        build_space("fe", 4, quadrature_order=1)
    with pytest.raises(ValueError):
        Family.parse("wavelet")


@pytest.mark.parametrize("family", ["spectral", "fe"])
def test_nestedness(family):
    coarse, fine = build_space(family, 4), build_space(family, 16)
    G = cross_gram(coarse, fine)
    # each coarse e_k is recovered from its projection onto the fine space
    np.testing.assert_allclose(G[:, : coarse.dim], np.eye(coarse.dim), atol=1e-10)
    np.testing.assert_allclose(G[:, coarse.dim :], 0.0, atol=1e-10)
    back = embed(np.eye(coarse.dim), coarse, fine)
    np.testing.assert_allclose(project(fine, np.eye(coarse.dim), coarse), back, atol=1e-10)


def test_spectral_cb_closed_form():
    for n in (1, 3, 10, 40):
        assert build_space("spectral", n).c_b == pytest.approx(spectral_c_b(n), rel=1e-10)


# -- project ------------------------------------------------------------------------


def test_project_examples():
    s = build_space("spectral", 2)
    np.testing.assert_allclose(project(s, lambda x: np.sqrt(2) * np.sin(np.pi * x)), [1.0, 0.0], atol=1e-13)
    np.testing.assert_allclose(project(s, lambda x: np.sqrt(2) * np.sin(3 * np.pi * x)), [0.0, 0.0], atol=1e-13)


@pytest.mark.parametrize("family,n", FAMILIES)
def test_project_idempotent(family, n, rng):
    fine = build_space(family, 32)
    s = build_space(family, n)
    h = rng.standard_normal(fine.dim)
    once = project(s, h, fine)
    twice = project(s, once, s)
    np.testing.assert_allclose(twice, once, atol=1e-12)


def test_project_rejects_bad_shape():
    s = build_space("spectral", 3)
    with pytest.raises(ValueError):
        project(s, np.ones(5), s)
    with pytest.raises(ValueError):
        project(s, np.ones(3))


# -- norms --------------------------------------------------------------------------


def test_norm_examples():
    s2 = build_space("spectral", 2)
    assert norms(s2, np.array([3.0, 4.0]))[0] == pytest.approx(5.0)
    s1 = build_space("spectral", 1)
    assert norms(s1, np.array([1.0]), p=2)[1] ** 2 == pytest.approx(1 + PI2, rel=1e-12)
    assert norms(s2, np.zeros(2)) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        norms(s2, np.ones(3))


def test_dual_norm_p2_closed_form(rng):
    s = build_space("spectral", 5)
    g = rng.standard_normal(5)
    expect = np.sqrt(g @ np.linalg.solve(s.v_gram, g))
    assert dual_norm(s, g, 2.0) == pytest.approx(expect, rel=1e-12)


@pytest.mark.parametrize("p", [2.0, 4.0])
def test_dual_norm_duality(p, rng):
    s = build_space("spectral", 6, p=p)
    g = rng.standard_normal(6)
    dn = float(dual_norm(s, g, p))
    W = rng.standard_normal((500, 6)) * (1.0 / np.arange(1, 7))
    ratio = np.abs(W @ g) / v_norm(s, W, p)
    assert np.all(ratio <= dn * (1 + 1e-9))
    # the sup is nearly attained by the best sample direction
    assert ratio.max() > 0.3 * dn


def test_dual_norm_batched_matches_rows(rng):
    s = build_space("fe", 8, p=4.0)
    G = rng.standard_normal((5, s.dim))
    batch = dual_norm(s, G, 4.0)
    single = [float(dual_norm(s, g, 4.0)) for g in G]
    np.testing.assert_allclose(batch, single, rtol=1e-12)


# -- c_b_ratio ----------------------------------------------------------------------


def test_cb_ratio_examples():
    s1, s2 = build_space("spectral", 1), build_space("spectral", 2)
    assert c_b_ratio(s1, 100, 1.0) == pytest.approx((1 + PI2) / 100)
    assert c_b_ratio(s1, 100, 1.0) == pytest.approx(0.1087, abs=1e-4)
    r = c_b_ratio(s2, 52, 1.0)
    assert r == pytest.approx((2 + 5 * PI2) / 52)
    assert r == pytest.approx(0.9875, abs=1e-4) and r < 1
    rhos = [c_b_ratio(s2, m, 1.0) for m in (1, 10, 100, 10**6)]
    assert all(b < a for a, b in zip(rhos, rhos[1:]))
    with pytest.raises(ValueError):
        c_b_ratio(s1, 0, 1.0)
    with pytest.raises(ValueError):
        c_b_ratio(s1, 10, 0.5)


# -- properties ---------------------------------------------------------------------

vec32 = st.lists(st.floats(-10, 10, allow_nan=False), min_size=32, max_size=32).map(np.array)


@pytest.mark.parametrize("family,n", FAMILIES)
def test_self_adjoint_200_pairs(family, n, rng):
    fine, s = build_space(family, 32), build_space(family, n)
    E = embed(np.eye(s.dim), s, fine)  # (dim, fine.dim)
    for _ in range(200):
        h, k = rng.standard_normal(fine.dim), rng.standard_normal(fine.dim)
        lhs = project(s, h, fine) @ E @ k
        rhs = h @ (E.T @ project(s, k, fine))
        assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(h) * np.linalg.norm(k)


@given(h=vec32, family=st.sampled_from(["spectral", "fe"]), n=st.sampled_from([2, 4, 8, 16]))
def test_projection_contracts(h, family, n):
    fine, s = build_space(family, 32), build_space(family, n)
    h = h[: fine.dim]
    assert np.linalg.norm(project(s, h, fine)) <= np.linalg.norm(h) + 1e-12


@given(v=st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=7, max_size=7).map(np.array),
       family=st.sampled_from(["spectral", "fe"]))
def test_parseval(v, family):
    s = build_space(family, 7 if family == "spectral" else 8)
    u = v @ s.values.T
    quad = np.sqrt(s.quadrature.integrate(u * u))
    assert abs(np.linalg.norm(v) - quad) <= 1e-8 * max(1.0, np.linalg.norm(v))


@pytest.mark.parametrize("family", ["spectral", "fe"])
def test_density_surrogate(family):
    f = lambda x: x * (1 - x)
    errs = []
    for n in (2, 4, 8, 16, 32):
        s = build_space(family, n)
        c = project(s, f)
        fine = build_space("fe", 256, quadrature_order=4)
        x, w = fine.quadrature.nodes, fine.quadrature.weights
        diff = f(x) - s.evaluate(c, x)
        errs.append(np.sqrt(diff**2 @ w))
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-3


def test_initial_profiles():
    s = build_space("spectral", 4)
    np.testing.assert_allclose(initial_coefficients(s, "sine1"), [1, 0, 0, 0], atol=1e-13)
    np.testing.assert_allclose(initial_coefficients(s, "zero"), 0.0)
    np.testing.assert_allclose(initial_coefficients(s, [2.0, 1.0]), [2, 1, 0, 0])
    assert initial_coefficients(s, "bump").shape == (4,)
    with pytest.raises(ValueError):
        initial_coefficients(s, "nope")
