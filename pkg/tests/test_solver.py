import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stochmono.operators import Constant, StructuralConstants, make_example_family, make_linear_heat
from stochmono.schemes import TimeGrid, step_coercivity
from stochmono.solver import (
    MaxIterations,
    MonotoneProblem,
    NonMonotoneDetected,
    fd_jacobian,
    norm_bound,
    solve,
    verify_norm_bound,
    wellposedness_window,
)
from stochmono.spaces import build_space


class Fn:
    def __init__(self, fn):
        self.fn = fn

    def __call__(self, t):
        return float(self.fn(t))


def constants_with_k1(k1):
    zero = Constant(0.0)
    return StructuralConstants(2.0, 1.0, Constant(1.0), k1, zero, zero)


def step_problem(pair, space, delta, y, tol=1e-10, x0=None, analytic=True):
    def apply_d(X):
        return X - delta * pair.drift(space, 0.0, X)

    jac = (lambda X: np.eye(space.dim) - delta * pair.drift_jacobian(space, 0.0, X)) if analytic else None
    return MonotoneProblem(apply_d, y, jac, 1.0, step_coercivity(pair, delta), tol, space, pair.p, x0=x0)


# -- solve --------------------------------------------------------------------------


def test_scalar_cubic():
    prob = MonotoneProblem(lambda X: X + X**3, np.array([2.0]), tolerance=1e-12)
    res = solve(prob)
    assert res.x[0] == pytest.approx(1.0, abs=1e-12)
    assert res.final_residual <= 1e-12


def test_linear_heat_step_diagonal(rng):
    heat = make_linear_heat()
    s = build_space("spectral", 6)
    delta = 0.01
    y = rng.standard_normal(6)
    res = solve(step_problem(heat, s, delta, y))
    k = np.arange(1, 7)
    np.testing.assert_allclose(res.x, y / (1 + delta * np.pi**2 * k**2), rtol=1e-12)


def test_p4_random_rhs_with_independent_reassembly(rng):
    pair = make_example_family(4, a=1.0)
    s = build_space("spectral", 4, p=4)
    fine = build_space("spectral", 4, quadrature_order=2 * (8 * 4 + 16), p=4)
    for _ in range(10):
        y = rng.standard_normal(4) * 3
        res = solve(step_problem(pair, s, 0.05, y))
        assert res.iterations <= 25
        resid = res.x - 0.05 * pair.drift(fine, 0.0, res.x) - y
        assert np.linalg.norm(resid) <= 1e-10


def test_fd_jacobian_path(rng):
    pair = make_example_family(4, a=1.0)
    s = build_space("fe", 8, p=4)
    y = rng.standard_normal((3, s.dim))
    a = solve(step_problem(pair, s, 0.02, y, analytic=False))
    b = solve(step_problem(pair, s, 0.02, y))
    np.testing.assert_allclose(a.x, b.x, atol=1e-9)
    assert np.all(a.final_residual <= 1e-10)


def test_fd_matches_analytic(rng):
    pair = make_example_family(3, a=1.0)
    s = build_space("spectral", 5, p=3)
    X = rng.standard_normal((4, 5))
    D = lambda Z: Z - 0.1 * pair.drift(s, 0.0, Z)
    J = np.eye(5) - 0.1 * pair.drift_jacobian(s, 0.0, X)
    F = fd_jacobian(D, X)
    assert np.linalg.norm(F - J) <= 1e-5 * np.linalg.norm(J)


def test_non_monotone_detected():
    # D(x) = -2x is monotone decreasing: the first accepted step exposes it
    prob = MonotoneProblem(lambda X: -2 * X, np.array([1.0]), max_iter=5)
    with pytest.raises(NonMonotoneDetected):
        solve(prob, x0=np.array([3.0]))


def test_max_iterations_carries_history():
    prob = MonotoneProblem(lambda X: X + X**3, np.array([1e6]), max_iter=2, tolerance=1e-14)
    with pytest.raises(MaxIterations) as info:
        solve(prob)
    assert len(info.value.history) >= 2


def test_relaxation_fallback():
    # a deliberately wrong Jacobian stalls Newton; relaxation still converges
    prob = MonotoneProblem(lambda X: X + 0.1 * np.tanh(X), np.array([0.7, -0.3]),
                           jacobian=lambda X: -np.eye(2)[None].repeat(X.shape[0], 0), max_iter=200)
    res = solve(prob)
    assert res.relaxation_steps > 0
    assert res.final_residual <= 1e-10


# -- norm bound ---------------------------------------------------------------------


def test_norm_bound_examples():
    assert norm_bound(1.0, 0.0, 0.0) == pytest.approx(1.0)
    heat = make_linear_heat()
    s = build_space("spectral", 4)
    prob = step_problem(heat, s, 0.1, np.array([1.0, 0, 0, 0]))
    res = solve(prob)
    ok, margin = verify_norm_bound(prob, res)
    assert ok and margin > 0
    zero = step_problem(heat, s, 0.1, np.zeros(4))
    ok, margin = verify_norm_bound(zero, solve(zero))
    assert ok and margin >= 1.0


@pytest.mark.parametrize("p,family", [(2.0, "spectral"), (4.0, "spectral"), (4.0, "fe")])
def test_norm_bound_adversarial_sweep(p, family, rng):
    pair = make_example_family(p, a=1.0)
    s = build_space(family, 8, p=p)
    for delta in (1e-3, 0.1, 1.0):
        Y = rng.standard_normal((100, s.dim)) * np.logspace(-2, 2, 100)[:, None]
        Y[:10] = np.eye(s.dim)[np.arange(10) % s.dim] * 50  # pure high modes
        prob = step_problem(pair, s, delta, Y)
        res = solve(prob)
        assert res.norm_bound_ok
        assert np.all(res.norm_margin >= 0)


# -- wellposedness window -----------------------------------------------------------


def test_window_examples():
    assert wellposedness_window(constants_with_k1(Constant(0.0)), TimeGrid(1.0, 1)).all_coercive
    k3 = constants_with_k1(Constant(3.0))
    assert not wellposedness_window(k3, TimeGrid(1.0, 1)).all_coercive
    assert wellposedness_window(k3, TimeGrid(1.0, 2)).all_coercive
    sing = constants_with_k1(Fn(lambda t: 1 / np.sqrt(t) if t > 0 else np.inf))
    rep = wellposedness_window(sing, TimeGrid(0.64, 1))
    assert rep.integrals[0] == pytest.approx(2 * np.sqrt(0.64), rel=1e-8)
    assert rep.all_coercive
    assert not wellposedness_window(sing, TimeGrid(1.21, 1)).all_coercive


# -- properties ---------------------------------------------------------------------


@pytest.mark.parametrize("pair_name", ["heat", "example"])
def test_strong_monotonicity_of_step_map(pair_name, rng):
    pair = make_linear_heat() if pair_name == "heat" else make_example_family(4, a=1.0, b=(0.5,), c=(0.5,))
    for n in (4, 32):
        s = build_space("spectral", n, p=pair.p)
        D = lambda X: X - 0.05 * pair.drift(s, 0.0, X)
        X1 = rng.standard_normal((1000, n)) / np.arange(1, n + 1)
        X2 = rng.standard_normal((1000, n)) / np.arange(1, n + 1)
        d = X1 - X2
        gap = np.einsum("pk,pk->p", D(X1) - D(X2), d)
        assert np.all(gap >= np.einsum("pk,pk->p", d, d) - 1e-9)


@given(seed=st.integers(0, 2**32 - 1), p=st.sampled_from([2.0, 3.0, 4.0]),
       delta=st.floats(1e-3, 1.0), scale=st.floats(0.01, 20.0))
def test_uniqueness_two_starts(seed, p, delta, scale):
    rng = np.random.default_rng(seed)
    pair = make_example_family(p, a=1.0)
    s = build_space("spectral", 6, p=p)
    y = rng.standard_normal(6) * scale
    a = solve(step_problem(pair, s, delta, y))
    b = solve(step_problem(pair, s, delta, y, x0=rng.standard_normal(6) * 10 * scale))
    assert np.linalg.norm(a.x - b.x) <= 1e-9
    assert a.final_residual <= 1e-10 and b.final_residual <= 1e-10
