"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the lines are also
repeated in the terminal summary.
"""
import time

import numpy as np
import pytest

from conftest import record_criterion
from stochmono import cli
from stochmono.analysis import (
    RunSpec,
    convergence_ladder,
    frontier_mismatch,
    monotonicity_gap,
    oracle_on_grid,
    stability_scan,
    stochastic_energy,
)
from stochmono.noise import aggregate, sample_batch
from stochmono.operators import (
    Constant,
    FlippedDrift,
    SineMode,
    check_conditions,
    make_example_family,
    make_linear_heat,
)
from stochmono.schemes import TimeGrid, run_batch, step_coercivity
from stochmono.solver import MonotoneProblem, solve
from stochmono.spaces import build_space, initial_coefficients

pytestmark = pytest.mark.slow


def _step_problem(pair, space, delta, y, x0=None):
    def apply_d(X):
        return X - delta * pair.drift(space, 0.0, X)

    def jac(X):
        return np.eye(space.dim) - delta * pair.drift_jacobian(space, 0.0, X)

    return MonotoneProblem(apply_d, y, jac, 1.0, step_coercivity(pair, delta), 1e-10, space, pair.p, x0=x0)


def test_criterion_1_solver():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_res, worst_gap, worst_margin = 0.0, 0.0, np.inf
    for p in (2.0, 4.0):
        pair = make_example_family(p, a=1.0)
        for n in (4, 16, 64):
            s = build_space("spectral", n, p=p)
            delta = 1.0 / 64
            Y = rng.standard_normal((100, n))
            a = solve(_step_problem(pair, s, delta, Y))
            b = solve(_step_problem(pair, s, delta, Y, x0=10 * rng.standard_normal((100, n))))
            for res in (a, b):
                D = res.x - delta * pair.drift(s, 0.0, res.x)
                worst_res = max(worst_res, float(np.linalg.norm(D - Y, axis=1).max()))
                worst_margin = min(worst_margin, float(np.min(res.norm_margin)))
            worst_gap = max(worst_gap, float(np.linalg.norm(a.x - b.x, axis=1).max()))
    elapsed = time.perf_counter() - t0
    ok = worst_res <= 1e-10 and worst_gap <= 1e-8 and worst_margin >= 0 and elapsed <= 120
    record_criterion(1, ok, f"residual {worst_res:.2e}, two-start {worst_gap:.2e}, "
                            f"norm margin {worst_margin:.3g}, {elapsed:.1f}s")
    assert ok


def test_criterion_2_conditions():
    t0 = time.perf_counter()
    found = {}
    shipped = {
        "linear_heat": make_linear_heat(sigma=(1.0, 0.5)),
        "example_p2": make_example_family(2, a=1.0, b=(0.5,), c=(0.5,), d=(SineMode(1, 0.5),)),
        "example_p4": make_example_family(4, a=1.0, b=(0.5,), c=(0.5,), d=(SineMode(1, 0.5),)),
    }
    for name, pair in shipped.items():
        s = build_space("spectral", 8, p=pair.p)
        k = pair.monotonicity_k
        rep = check_conditions(pair, s, 10_000, seed=11, k_fn=Constant(k) if k > 0 else None)
        found[name] = sum(rep[c].violations for c in ("C1", "C2", "C4"))
    adv = make_example_family(4, a=1.0, b=(3.0,), validate=False)
    rep = check_conditions(adv, build_space("spectral", 8, p=4), 10_000, seed=11)
    found["adversarial"] = sum(rep[c].violations for c in ("C1", "C2", "C4"))
    elapsed = time.perf_counter() - t0
    ok = all(found[k] == 0 for k in shipped) and found["adversarial"] >= 1 and elapsed <= 60
    record_criterion(2, ok, f"violations {found}, {elapsed:.1f}s")
    assert ok


def test_criterion_3_stability():
    t0 = time.perf_counter()
    heat = make_linear_heat()
    cells = stability_scan("spectral", [2, 4, 6, 8, 10, 12], [16, 32, 64, 128, 256, 512], heat)
    mismatch = frontier_mismatch(cells)
    energy = []
    pairs = {"heat": make_linear_heat(sigma=(1.0,)),
             "example_p2": make_example_family(2, a=1.0, b=(0.5,), d=(SineMode(1, 0.5),))}
    for name, pair in pairs.items():
        for n, m in ((2, 128), (2, 256), (4, 1024), (8, 4096)):
            spec = RunSpec("explicit", "spectral", n, m, pair, "sine1")
            assert spec.rho() <= 0.5
            led = stochastic_energy(spec, 500, seed=5)
            energy.append((name, n, m, led.within_bound and led.aborted == 0, float(led.slack.min())))
    elapsed = time.perf_counter() - t0
    ok = mismatch <= 1 and all(e[3] for e in energy) and elapsed <= 300
    worst = min(e[4] for e in energy)
    record_criterion(3, ok, f"frontier mismatch {mismatch} cell(s), {sum(e[3] for e in energy)}/{len(energy)} "
                            f"stochastic cells within bound (min slack {worst:.3g}), {elapsed:.1f}s")
    assert ok


def test_criterion_4_convergence():
    t0 = time.perf_counter()
    heat = make_linear_heat(sigma=(1.0,))
    imp = convergence_ladder(heat, [(8, 16), (8, 64), (8, 256)], 2000, 21)
    imp_ok = imp.strictly_decreasing and 0.7 <= imp.order <= 1.3
    exp = convergence_ladder(heat, [(2, 16), (4, 256), (8, 4096)], 2000, 22, scheme="explicit")
    exp_ok = exp.decreasing_within(2.0) and exp.levels[-1].strong_h_error_sq < exp.levels[0].strong_h_error_sq
    elapsed = time.perf_counter() - t0
    ok = imp_ok and exp_ok and elapsed <= 900
    record_criterion(4, ok, f"implicit errors {np.array2string(imp.errors, precision=3)} order {imp.order:.3f}; "
                            f"explicit errors {np.array2string(exp.errors, precision=3)} paired z "
                            f"{[round(z, 1) for z in exp.paired_z]}, {elapsed:.1f}s")
    assert ok


def test_criterion_5_nonlinear():
    t0 = time.perf_counter()
    det = make_example_family(4, a=1.0)
    monotone = True
    for family in ("spectral", "fe"):
        s = build_space(family, 16, p=4)
        u0 = 3.0 * initial_coefficients(s, "bump")
        b = run_batch("implicit_spacetime", s, TimeGrid(1.0, 64), det, u0, np.zeros((1, 1, 64)))
        # the scheme starts from zero at t_0; monotone decay is from t_1 on
        monotone &= bool(b.ok[0] and np.all(np.diff(b.h_norms[0][1:]) <= 1e-12))
    pair = make_example_family(4, a=1.0, b=(0.5,), c=(0.5,), d=(SineMode(1, 0.5),))
    lad = convergence_ladder(pair, [(2, 4), (4, 16)], 500, 31, reference=(16, 1024))
    elapsed = time.perf_counter() - t0
    ok = monotone and lad.decreasing_within(2.0) and elapsed <= 900
    record_criterion(5, ok, f"H-norm non-increasing {monotone}; ladder errors "
                            f"{np.array2string(lad.errors, precision=3)} paired z {lad.paired_z[0]:.1f}, "
                            f"{elapsed:.1f}s")
    assert ok


def test_criterion_6_gap():
    t0 = time.perf_counter()
    heat = make_linear_heat(sigma=(1.0,))
    s = build_space("spectral", 8)
    grid = TimeGrid(1.0, 64)
    y, dW = oracle_on_grid(heat, s, grid, "sine1", 41, range(1000))
    u = run_batch("implicit_spacetime", s, grid, heat, initial_coefficients(s, "sine1"), aggregate(dW, 64))
    gaps = {"heat_vs_oracle": monotonicity_gap(u, y, heat)}
    # two solutions of the p=4 family from different initial data on shared noise
    pair = make_example_family(4, a=1.0, b=(0.5,), d=(SineMode(1, 0.5),))
    s4 = build_space("spectral", 8, p=4)
    dW4 = sample_batch(1, 1.0, 6, 42, range(500))
    u1 = run_batch("implicit_spacetime", s4, grid, pair, initial_coefficients(s4, "sine1"), dW4)
    u2 = run_batch("implicit_spacetime", s4, grid, pair, initial_coefficients(s4, "bump"), dW4)
    gaps["p4_two_starts"] = monotonicity_gap(u1, u2.values, pair)
    flipped = monotonicity_gap(u, y, FlippedDrift(heat))
    elapsed = time.perf_counter() - t0
    ok = all(g.mean <= 3 * g.se for g in gaps.values()) and flipped.z > 3 and elapsed <= 300
    detail = ", ".join(f"{k} {g.mean:.3g}±{g.se:.2g}" for k, g in gaps.items())
    record_criterion(6, ok, f"{detail}; flipped z {flipped.z:.1f}, {elapsed:.1f}s")
    assert ok


def test_criterion_7_reproducibility(tmp_path, capsys):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[run]\nscheme = implicit_spacetime\nn = 8\nm = 64\npaths = 50\nseed = 99\n"
                   "[operator]\nfamily = example\np = 4\na = 1\nb = 0.5\nc = 0.5\nd = sine1:0.5\n")
    hashes, blobs = [], []
    for run in ("first", "second"):
        out = tmp_path / run
        assert cli.main(["simulate", "--config", str(cfg), "--out", str(out), "--workers", "1"]) == 0
        hashes.append(__import__("json").loads((out / "manifest.json").read_text())["content_hash"])
        blobs.append((out / "trajectories.csv").read_bytes())
    capsys.readouterr()
    ok = hashes[0] == hashes[1] and blobs[0] == blobs[1]
    record_criterion(7, ok, f"content hash {hashes[0][:16]} vs {hashes[1][:16]}, CSV bytes equal {blobs[0] == blobs[1]}")
    assert ok
