"""Monte Carlo harness: strong errors, energy bounds, stability scans, monotonicity gap.

Paths are processed in fixed-size chunks.  Each chunk is a pure function of
``(config, seed, path indices)`` and the reduction is an ordered
concatenation, so results do not depend on the worker count.
"""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss

from . import noise
from .operators import ExampleFamily, SineMode, UnitFactor
from .schemes import Scheme, TimeGrid, TrajectoryBatch, run_batch
from .spaces import (DiscreteSpace, Family, build_space, c_b_ratio, cross_gram, embed, initial_coefficients,
                     _nested)

CHUNK = 250


class RefNotFiner(ValueError):
    pass


class CouplingViolated(ValueError):
    pass


@lru_cache(maxsize=64)
def cached_space(family: str, n: int, quadrature_order: int | None = None, p: float = 2.0) -> DiscreteSpace:
    return build_space(family, n, quadrature_order, p)


@dataclass(frozen=True, eq=False)
class RunSpec:
    """One scheme configuration; ``n`` is the reference resolution for ``implicit_time``."""

    scheme: str
    family: str
    n: int
    m: int
    pair: object
    u0: object = "sine1"
    T: float = 1.0
    quadrature_order: int | None = None

    @property
    def kind(self) -> Scheme:
        return Scheme.parse(self.scheme)

    @property
    def space(self) -> DiscreteSpace:
        return cached_space(Family.parse(self.family).value, self.n, self.quadrature_order, float(self.pair.p))

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.m)

    @property
    def level(self) -> int:
        return noise.dyadic_level(self.m)

    def rho(self) -> float:
        return c_b_ratio(self.space, self.m, self.pair.constants.alpha, self.T)

    def key(self) -> tuple:
        return (self.kind, Family.parse(self.family), self.n, self.m, id(self.pair), repr(self.u0), self.T,
                self.quadrature_order)

    def label(self) -> str:
        return f"{self.kind.value}(n={self.n}, m={self.m})"


@dataclass(frozen=True)
class OracleReference:
    """Exact Ornstein-Uhlenbeck reference for linear heat with sine-mode additive noise."""

    modes: int | None = None


# -- OU oracle ----------------------------------------------------------------------


@dataclass(frozen=True)
class OUOracle:
    """Per-mode exact solution of ``du = mu u'' dt + sum_j sigma_j e_{k_j} dW^j``.

    ``mu[k]`` is the decay rate of mode ``k + 1``; ``drive[j]`` the mode index
    fed by ``W^j`` (or -1) with amplitude ``sigma[j]``.
    """

    mu: np.ndarray
    sigma: np.ndarray
    drive: np.ndarray
    u0: np.ndarray

    @property
    def modes(self) -> int:
        return self.mu.size

    @classmethod
    def from_pair(cls, pair, u0, modes: int | None = None) -> "OUOracle":
        if not (isinstance(pair, ExampleFamily) and pair.linear and pair.additive and pair.autonomous):
            raise ValueError("oracle needs autonomous linear heat with additive noise")
        if not isinstance(pair.time_factor, UnitFactor) or not hasattr(pair.a, "value"):
            raise ValueError("oracle needs a constant drift coefficient")
        drive, sigma = [], []
        for f in pair.d:
            if isinstance(f, SineMode):
                drive.append(f.k - 1)
                sigma.append(f.amplitude)
            elif getattr(f, "value", None) == 0.0:
                drive.append(-1)
                sigma.append(0.0)
            else:
                raise ValueError("oracle needs sine-mode noise profiles")
        used = [k for k in drive if k >= 0]
        if len(set(used)) != len(used):
            raise ValueError("each noise component must drive a distinct mode")
        u0 = np.asarray(u0, dtype=float)
        N = max([modes or 0, u0.size] + [k + 1 for k in used])
        u0 = np.pad(u0, (0, N - u0.size))
        mu = pair.a.value * (np.pi * np.arange(1, N + 1)) ** 2
        return cls(mu, np.array(sigma), np.array(drive, dtype=int), u0)

    def path(self, dW: np.ndarray, aux: np.ndarray, T: float) -> np.ndarray:
        """Exact node values on the increments' mesh, shape ``(P, M + 1, N)``.

        The stochastic convolution over each fine interval is drawn from its
        exact Gaussian law conditional on the Brownian increment there.
        """
        P, r, M = dW.shape
        h = T / M
        out = np.empty((P, M + 1, self.modes))
        decay = np.exp(-self.mu * h)
        x = np.broadcast_to(self.u0, (P, self.modes)).copy()
        out[:, 0] = x
        forcing = np.zeros((P, M, self.modes))
        for j in range(r):
            k = self.drive[j]
            if k < 0 or self.sigma[j] == 0.0:
                continue
            mu = self.mu[k]
            cov = -np.expm1(-mu * h) / mu
            var = -np.expm1(-2.0 * mu * h) / (2.0 * mu)
            cond = max(var - cov**2 / h, 0.0)
            forcing[:, :, k] += self.sigma[j] * ((cov / h) * dW[:, j, :] + np.sqrt(cond) * aux[:, j, :])
        for i in range(M):
            x = decay * x + forcing[:, i]
            out[:, i + 1] = x
        return out

    def second_moment(self, t: float) -> float:
        """``E|u(t)|_H^2`` in closed form."""
        det = float(np.sum((np.exp(-self.mu * t) * self.u0) ** 2))
        sto = 0.0
        for j, k in enumerate(self.drive):
            if k >= 0:
                mu = self.mu[k]
                sto += self.sigma[j] ** 2 * (-np.expm1(-2 * mu * t)) / (2 * mu)
        return det + sto

    def stationary_variance(self, j: int) -> float:
        return float(self.sigma[j] ** 2 / (2.0 * self.mu[self.drive[j]]))


# -- path runs ------------------------------------------------------------------------


def run_paths(spec: RunSpec, dW_fine: np.ndarray, indices, *, tolerance: float = 1e-10) -> TrajectoryBatch:
    """Run ``spec`` on aggregated fine increments ``(P, r, M)``."""
    space = spec.space
    dW = noise.aggregate(dW_fine, spec.m)
    U0 = initial_coefficients(space, spec.u0)
    pair = spec.pair
    if getattr(pair, "noise_dependence", "deterministic") == "deterministic":
        return run_batch(spec.kind, space, spec.grid, pair, U0, dW, tolerance=tolerance)
    parts = [run_batch(spec.kind, space, spec.grid, pair.realize(idx), U0, dW[k:k + 1], tolerance=tolerance)
             for k, idx in enumerate(indices)]
    first = parts[0]
    return TrajectoryBatch(first.scheme, first.grid, space, np.concatenate([b.values for b in parts]),
                           np.concatenate([b.solver_iters for b in parts]), np.concatenate([b.residuals for b in parts]),
                           np.concatenate([b.abort_step for b in parts]), sum((b.abort_reason for b in parts), []),
                           first.p)


def _draw(r: int, T: float, level: int, seed: int, indices, with_aux: bool):
    dW = noise.sample_batch(r, T, level, seed, indices)
    aux = None
    if with_aux:
        aux = np.stack([noise.aux_normals(seed, i, (r, 2**level)) for i in indices])
    return dW, aux


class _Comparer:
    """H and V distances between coefficient arrays of two spaces."""

    def __init__(self, a: DiscreteSpace, b: DiscreteSpace, p: float):
        self.a, self.b, self.p = a, b, p
        self.same = a is b
        self.nested = not self.same and a.family == b.family and _nested(a, b)
        if not (self.same or self.nested):
            self.G = cross_gram(a, b)
        x = b.quadrature.nodes if b.dim >= a.dim else a.quadrature.nodes
        w = b.quadrature.weights if b.dim >= a.dim else a.quadrature.weights
        self.w = w
        self.va, self.da = a.basis_values(x)
        self.vb, self.db = b.basis_values(x)

    def h_sq(self, U: np.ndarray, R: np.ndarray) -> np.ndarray:
        if self.same:
            d = U - R
            return np.einsum("...k,...k->...", d, d)
        if self.nested:
            d = embed(U, self.a, self.b) - R
            return np.einsum("...k,...k->...", d, d)
        uu = np.einsum("...k,...k->...", U, U)
        rr = np.einsum("...k,...k->...", R, R)
        return np.maximum(uu + rr - 2.0 * np.einsum("...k,kl,...l->...", U, self.G, R), 0.0)

    def v_pow(self, U: np.ndarray, R: np.ndarray) -> np.ndarray:
        d = U @ self.va.T - R @ self.vb.T
        dd = U @ self.da.T - R @ self.db.T
        return (np.abs(d) ** self.p + np.abs(dd) ** self.p) @ self.w


# -- ErrorReport / ladder -----------------------------------------------------------------


@dataclass
class ErrorReport:
    label: str
    n: int
    m: int
    delta: float
    strong_h_error_sq: float
    strong_h_error_se: float
    weighted_v_error: float
    weighted_v_error_se: float
    energy_sup_h: float
    energy_int_v: float
    rho: float
    gamma_class: bool
    paths: int
    aborted: int
    per_path: np.ndarray = field(repr=False, default=None)

    def row(self) -> dict:
        return {"label": self.label, "n": self.n, "m": self.m, "delta": self.delta,
                "error_sq": self.strong_h_error_sq, "error_sq_se": self.strong_h_error_se,
                "weighted_v_error": self.weighted_v_error, "weighted_v_error_se": self.weighted_v_error_se,
                "energy_sup_h": self.energy_sup_h, "energy_int_v": self.energy_int_v,
                "rho": self.rho, "gamma_class": int(self.gamma_class), "paths": self.paths, "aborted": self.aborted}


@dataclass
class LadderReport:
    levels: list
    slope_sq: float | None
    reference: str
    paired_z: list

    @property
    def order(self) -> float | None:
        """Strong order in ``delta``: half the slope of ``log error^2``."""
        return None if self.slope_sq is None else 0.5 * self.slope_sq

    @property
    def errors(self) -> np.ndarray:
        return np.array([lv.strong_h_error_sq for lv in self.levels])

    @property
    def strictly_decreasing(self) -> bool:
        e = self.errors
        return bool(np.all(np.diff(e) < 0))

    def decreasing_within(self, k: float = 2.0) -> bool:
        """Every step down holds up to ``k`` paired standard errors."""
        return all(z > -k for z in self.paired_z)

    def rows(self) -> list[dict]:
        out = []
        for i, lv in enumerate(self.levels):
            row = lv.row()
            row["paired_z"] = self.paired_z[i - 1] if i else float("nan")
            out.append(row)
        return out


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return float("nan"), float("nan")
    if x.size == 1:
        return float(x[0]), float("nan")
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def _lambda_weights(pair, grid: TimeGrid) -> np.ndarray:
    """``int lambda`` over each grid interval."""
    lam = pair.constants.lambda_fn
    xg, wg = leggauss(4)
    nodes = grid.nodes
    a, b = nodes[:-1, None], nodes[1:, None]
    s = a + 0.5 * (b - a) * (xg + 1.0)
    vals = np.vectorize(lambda t: float(lam(t)))(s)
    return 0.5 * (b - a)[:, 0] * (vals @ wg)


def _ladder_chunk(task):
    levels, ref, seed, indices, level, want_v = task
    pair = levels[0].pair
    r, T = pair.r, levels[0].T
    dW, aux = _draw(r, T, level, seed, indices, isinstance(ref, OracleReference))
    p = float(pair.p)
    if isinstance(ref, OracleReference):
        base = levels[0]
        n_max = max(lv.n for lv in levels if Family.parse(lv.family) is Family.SPECTRAL_SINE) if any(
            Family.parse(lv.family) is Family.SPECTRAL_SINE for lv in levels) else 1
        modes = max(ref.modes or 0, n_max)
        ospace = cached_space(Family.SPECTRAL_SINE.value, modes, None, p)
        u0 = initial_coefficients(ospace, base.u0)
        oracle = OUOracle.from_pair(pair, u0, modes)
        if oracle.modes != ospace.dim:
            ospace = cached_space(Family.SPECTRAL_SINE.value, oracle.modes, None, p)
        ref_vals = oracle.path(dW, aux, T)
        ref_space, ref_ok, ref_grid = ospace, np.ones(len(indices), bool), TimeGrid(T, 2**level)
    else:
        rb = run_paths(ref, dW, indices)
        ref_vals, ref_space, ref_ok, ref_grid = rb.values, ref.space, rb.ok, ref.grid
    out = []
    for spec in levels:
        tb = run_paths(spec, dW, indices)
        ok = tb.ok & ref_ok
        cmp = _Comparer(spec.space, ref_space, p)
        err = np.full(len(indices), np.nan)
        err[ok] = cmp.h_sq(tb.values[ok, -1], ref_vals[ok, -1])
        verr = np.full(len(indices), np.nan)
        if want_v and ok.any():
            ratio = ref_grid.m // spec.m
            if ratio * spec.m != ref_grid.m:
                raise RefNotFiner("reference mesh must refine the scheme mesh")
            # on ref interval j the scheme reads kappa_2 = node j // ratio + 1
            idx = np.arange(ref_grid.m) // ratio + 1
            lw = _lambda_weights(pair, ref_grid)
            U = tb.values[ok][:, idx]
            R = ref_vals[ok][:, :-1]
            verr[ok] = cmp.v_pow(U, R) @ lw
        h2 = np.einsum("pik,pik->pi", tb.values, tb.values)
        lw_s = _lambda_weights(pair, spec.grid)
        vint = tb.v_norms()[:, 1:] ** p @ lw_s
        out.append({"err": err, "verr": verr, "h2": h2, "vint": vint, "ok": tb.ok, "ref_ok": ref_ok})
    return out


def _map(fn, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    import multiprocessing as mp

    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
        return list(ex.map(fn, tasks))


def _chunks(n_paths: int, chunk: int):
    return [list(range(s, min(s + chunk, n_paths))) for s in range(0, n_paths, chunk)]


def _check_reference(spec: RunSpec, ref) -> None:
    if isinstance(ref, OracleReference):
        return
    if ref is spec or ref.key() == spec.key():
        return
    if not ref.kind.implicit:
        raise RefNotFiner("reference must be an implicit scheme")
    if ref.n < 4 * spec.n or ref.m < 64 * spec.m:
        raise RefNotFiner(f"reference (n={ref.n}, m={ref.m}) not finer than (n={spec.n}, m={spec.m}): "
                          "need n_ref >= 4 n and m_ref >= 64 m")
    if ref.T != spec.T or ref.pair is not spec.pair:
        raise RefNotFiner("reference must share the horizon and operator pair")


def ladder_errors(levels: list, ref, n_paths: int, seed: int, *, gamma: float = 0.5, workers: int = 1,
                  chunk: int = CHUNK, weighted_v: bool = True) -> LadderReport:
    """Coupled strong errors at ``T`` for several configurations against one reference."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    for spec in levels:
        _check_reference(spec, ref)
    ms = [lv.m for lv in levels] + ([] if isinstance(ref, OracleReference) else [ref.m])
    level = max(noise.dyadic_level(m) for m in ms)
    tasks = [(levels, ref, seed, idx, level, weighted_v) for idx in _chunks(n_paths, chunk)]
    results = _map(_ladder_chunk, tasks, workers)
    reports, per_level_err = [], []
    for li, spec in enumerate(levels):
        err = np.concatenate([r[li]["err"] for r in results])
        verr = np.concatenate([r[li]["verr"] for r in results])
        h2 = np.concatenate([r[li]["h2"] for r in results])
        vint = np.concatenate([r[li]["vint"] for r in results])
        ok = np.concatenate([r[li]["ok"] for r in results])
        ref_ok = np.concatenate([r[li]["ref_ok"] for r in results])
        good = ok & ref_ok
        e_m, e_se = _mean_se(err[good])
        v_m, v_se = _mean_se(verr[good]) if weighted_v else (float("nan"), float("nan"))
        rho = spec.rho()
        reports.append(ErrorReport(spec.label(), spec.n, spec.m, spec.grid.delta, e_m, e_se, v_m, v_se,
                                   float(np.max(h2[ok].mean(axis=0))) if ok.any() else float("nan"),
                                   float(vint[ok].mean()) if ok.any() else float("nan"),
                                   rho, rho <= gamma, int(good.sum()), int((~ok).sum()), err))
        per_level_err.append((err, good))
    z = []
    for (a, ga), (b, gb) in zip(per_level_err[:-1], per_level_err[1:]):
        both = ga & gb
        d = a[both] - b[both]
        mean, se = _mean_se(d)
        z.append(mean / se if se and np.isfinite(se) and se > 0 else (math.inf if mean > 0 else (0.0 if mean == 0 else -math.inf)))
    slope = fit_slope([r.delta for r in reports], [r.strong_h_error_sq for r in reports])
    ref_label = "oracle" if isinstance(ref, OracleReference) else ref.label()
    return LadderReport(reports, slope, ref_label, z)


def fit_slope(deltas, errors) -> float | None:
    """Least-squares slope of ``log error`` against ``log delta``; ``None`` below two usable levels."""
    d = np.asarray(deltas, float)
    e = np.asarray(errors, float)
    keep = (e > 0) & np.isfinite(e)
    if keep.sum() < 2:
        return None
    return float(np.polyfit(np.log(d[keep]), np.log(e[keep]), 1)[0])


def strong_error_at_T(scheme_config: RunSpec, ref_config, n_paths: int, seed: int, **kw) -> ErrorReport:
    """Mean and standard error of ``|u(T) - u_ref(T)|_H^2`` over coupled paths."""
    return ladder_errors([scheme_config], ref_config, n_paths, seed, **kw).levels[0]


def convergence_ladder(pair, ladder, n_paths: int, seed: int, *, scheme: str = "implicit_spacetime",
                       family: str = "spectral", reference=None, u0="sine1", T: float = 1.0, gamma: float = 0.5,
                       workers: int = 1, chunk: int = CHUNK, weighted_v: bool = True) -> LadderReport:
    """Errors along ``ladder = [(n, m), ...]`` and the fitted slope of ``log error^2`` in ``log delta``.

    ``reference`` is an :class:`OracleReference`, a :class:`RunSpec`, or an
    ``(n, m)`` pair for a finer implicit space-time run.
    """
    levels = [RunSpec(scheme, family, int(n), int(m), pair, u0, T) for n, m in ladder]
    if not levels:
        raise ValueError("empty ladder")
    if levels[0].kind is Scheme.EXPLICIT:
        rhos = [lv.rho() for lv in levels]
        if any(b >= a for a, b in zip(rhos[:-1], rhos[1:])):
            raise CouplingViolated(f"explicit ladder needs strictly decreasing rho, got {rhos}")
    if reference is None:
        reference = OracleReference()
    elif isinstance(reference, tuple):
        reference = RunSpec("implicit_spacetime", family, int(reference[0]), int(reference[1]), pair, u0, T)
    return ladder_errors(levels, reference, n_paths, seed, gamma=gamma, workers=workers, chunk=chunk,
                         weighted_v=weighted_v)


# -- energy ------------------------------------------------------------------------------


@dataclass
class EnergyLedger:
    mean_h: np.ndarray
    se_h: np.ndarray
    bound: np.ndarray
    energy_sup_h: float
    energy_int_v: float
    paths: int
    aborted: int

    @property
    def slack(self) -> np.ndarray:
        """``bound - mean + 3 s.e.`` per node; negative entries flag a mean above the bound by more than 3 s.e."""
        se = np.nan_to_num(self.se_h, nan=0.0)
        # relative 1e-12 absorbs rounding at nodes where the bound is attained
        return self.bound * (1.0 + 1e-12) - self.mean_h + 3.0 * se

    @property
    def within_bound(self) -> bool:
        return bool(np.all(self.slack >= 0.0))


def gronwall_bound(pair, grid: TimeGrid, h0: float, scheme, gamma: float = 0.5) -> np.ndarray:
    """Node-wise bound on ``E|u(t_i)|_H^2``.

    Explicit: ``(|u0|^2 + int_0^{t_i}[K1bar + gamma K2 / alpha]) exp(int_0^{t_i} K1)``.
    Implicit: ``(|u0|^2 + int_0^{t_i} K1bar) prod_{k<i} 1/(1 - beta_k)`` with
    ``beta_k = int_{t_k}^{t_{k+1}} K1``; infinite when some ``beta_k >= 1``.
    """
    c = pair.constants
    nodes = grid.nodes
    steps = np.array([[c.integral(name, a, b) for name in ("k1", "k1bar", "k2")]
                      for a, b in zip(nodes[:-1], nodes[1:])])
    k1 = np.concatenate([[0.0], np.cumsum(steps[:, 0])])
    k1b = np.concatenate([[0.0], np.cumsum(steps[:, 1])])
    k2 = np.concatenate([[0.0], np.cumsum(steps[:, 2])])
    if Scheme.parse(scheme) is Scheme.EXPLICIT:
        return (h0 + k1b + gamma * k2 / c.alpha) * np.exp(k1)
    beta = steps[:, 0]
    with np.errstate(divide="ignore"):
        factor = np.concatenate([[1.0], np.cumprod(np.where(beta < 1.0, 1.0 / (1.0 - beta), np.inf))])
    out = (h0 + k1b) * factor
    out[0] = max(out[0], 0.0)
    return out


def energy_ledger(batch: TrajectoryBatch, pair, u0_coeffs=None, gamma: float = 0.5) -> EnergyLedger:
    """Monte Carlo energy functionals of a batch next to the discrete Gronwall bound."""
    ok = batch.ok
    vals = batch.values[ok]
    h2 = np.einsum("pik,pik->pi", vals, vals)
    mean = h2.mean(axis=0) if vals.shape[0] else np.full(batch.grid.m + 1, np.nan)
    se = h2.std(axis=0, ddof=1) / math.sqrt(h2.shape[0]) if h2.shape[0] > 1 else np.full_like(mean, np.nan)
    if u0_coeffs is None:
        start = batch.values[0, 0] if batch.scheme is Scheme.EXPLICIT else batch.values[0, 1]
        h0 = float(start @ start) if batch.scheme is Scheme.EXPLICIT else float("nan")
    else:
        h0 = float(np.dot(u0_coeffs, u0_coeffs))
    bound = gronwall_bound(pair, batch.grid, h0, batch.scheme, gamma)
    lw = _lambda_weights(pair, batch.grid)
    vint = float((batch.v_norms()[ok][:, 1:] ** batch.p @ lw).mean()) if ok.any() else float("nan")
    return EnergyLedger(mean, se, bound, float(np.nanmax(mean)), vint, int(ok.sum()), int((~ok).sum()))


# -- stability scan ----------------------------------------------------------------------------


@dataclass
class StabilityCell:
    n: int
    m: int
    rho: float
    stable: bool
    predicted_stable: bool | None
    energy_sup_h: float
    bound: float
    aborted: int
    paths: int

    def row(self) -> dict:
        return {"n": self.n, "m": self.m, "rho": self.rho, "stable": int(self.stable),
                "predicted_stable": "" if self.predicted_stable is None else int(self.predicted_stable),
                "energy_sup_h": self.energy_sup_h, "bound": self.bound, "aborted": self.aborted, "paths": self.paths}


def max_decay_rate(pair, space: DiscreteSpace, t: float = 0.0) -> float | None:
    """Largest eigenvalue of ``-Pi_n A`` for linear pairs, else ``None``."""
    if not getattr(pair, "linear", False):
        return None
    J = pair.drift_jacobian(space, t, np.zeros(space.dim))
    return float(np.linalg.eigvalsh(-0.5 * (J + J.T)).max())


def stability_scan(space_family, n_list, m_list, pair, n_paths: int = 1, gamma: float = 0.5, *,
                   mode: str = "deterministic", scheme: str = "explicit", u0="ones", seed: int = 0,
                   T: float = 1.0, workers: int = 1, chunk: int = CHUNK) -> list[StabilityCell]:
    """Label each ``(n, m)`` cell stable or unstable.

    Deterministic mode runs one noise-free path from ``u0`` and calls a cell
    unstable if it aborts or ``|u(t_i)|_H`` ever exceeds ``|u(t_1)|_H``.
    Stochastic mode calls it stable when no path aborts and the Monte Carlo
    energy stays under the Gronwall bound within 3 standard errors.
    """
    cells = []
    for n in n_list:
        space = cached_space(Family.parse(space_family).value, int(n), None, float(pair.p))
        U0 = initial_coefficients(space, u0)
        mu_max = max_decay_rate(pair, space)
        for m in m_list:
            grid = TimeGrid(T, int(m))
            rho = c_b_ratio(space, int(m), pair.constants.alpha, T)
            pred = None if (mu_max is None or Scheme.parse(scheme).implicit) else bool(grid.delta * mu_max <= 2.0)
            if Scheme.parse(scheme).implicit and mu_max is not None:
                pred = True
            if mode == "deterministic":
                b = run_batch(scheme, space, grid, pair, U0, np.zeros((1, pair.r, int(m))))
                h = b.h_norms[0]
                ref = h[1]
                grew = bool(np.any(h[1:] > ref * (1.0 + 1e-12) + 1e-300)) if b.ok[0] else True
                stable = b.ok[0] and not grew
                bound = gronwall_bound(pair, grid, float(U0 @ U0), scheme, gamma)
                cells.append(StabilityCell(int(n), int(m), rho, bool(stable), pred,
                                           float(np.nanmax(h**2)) if b.ok[0] else float("inf"),
                                           float(bound.max()), int(not b.ok[0]), 1))
            else:
                spec = RunSpec(scheme, space_family, int(n), int(m), pair, u0, T)
                led = stochastic_energy(spec, n_paths, seed, gamma=gamma, workers=workers, chunk=chunk)
                stable = led.aborted == 0 and led.within_bound
                cells.append(StabilityCell(int(n), int(m), rho, bool(stable), pred, led.energy_sup_h,
                                           float(np.max(led.bound)), led.aborted, led.paths + led.aborted))
    return cells


def _energy_chunk(task):
    spec, seed, indices = task
    dW, _ = _draw(spec.pair.r, spec.T, spec.level, seed, indices, False)
    b = run_paths(spec, dW, indices)
    h2 = np.einsum("pik,pik->pi", b.values, b.values)
    lw = _lambda_weights(spec.pair, spec.grid)
    vint = b.v_norms()[:, 1:] ** b.p @ lw
    return h2, vint, b.ok


def stochastic_energy(spec: RunSpec, n_paths: int, seed: int, *, gamma: float = 0.5, workers: int = 1,
                      chunk: int = CHUNK) -> EnergyLedger:
    """Energy ledger of ``n_paths`` coupled-seed paths of ``spec``."""
    res = _map(_energy_chunk, [(spec, seed, idx) for idx in _chunks(n_paths, chunk)], workers)
    h2 = np.concatenate([r[0] for r in res])
    vint = np.concatenate([r[1] for r in res])
    ok = np.concatenate([r[2] for r in res])
    h2 = h2[ok]
    mean = h2.mean(axis=0) if h2.shape[0] else np.full(spec.m + 1, np.nan)
    se = h2.std(axis=0, ddof=1) / math.sqrt(h2.shape[0]) if h2.shape[0] > 1 else np.full_like(mean, np.nan)
    U0 = initial_coefficients(spec.space, spec.u0)
    bound = gronwall_bound(spec.pair, spec.grid, float(U0 @ U0), spec.kind, gamma)
    return EnergyLedger(mean, se, bound, float(np.nanmax(mean)), float(vint[ok].mean()) if ok.any() else float("nan"),
                        int(ok.sum()), int((~ok).sum()))


def frontier_mismatch(cells: list[StabilityCell]) -> int:
    """Largest distance, in grid cells along ``m``, between observed and predicted stability edges."""
    worst = 0
    for n in sorted({c.n for c in cells}):
        row = sorted((c for c in cells if c.n == n), key=lambda c: c.m)
        if any(c.predicted_stable is None for c in row):
            continue
        obs = [c.stable for c in row]
        pred = [c.predicted_stable for c in row]
        for k, (o, p_) in enumerate(zip(obs, pred)):
            if o != p_:
                # cells between k and the nearest predicted edge (edge j sits between j-1 and j)
                flips = [j for j in range(1, len(pred)) if pred[j] != pred[j - 1]]
                dist = min((j - k if k < j else k - j + 1) for j in flips) if flips else len(row)
                worst = max(worst, dist)
    return worst


# -- monotonicity gap ------------------------------------------------------------------------------


@dataclass
class GapEstimate:
    mean: float
    se: float
    paths: int
    per_path: np.ndarray = field(repr=False, default=None)

    @property
    def z(self) -> float:
        if not self.se or not np.isfinite(self.se):
            return 0.0 if self.mean == 0 else math.copysign(math.inf, self.mean)
        return self.mean / self.se


def monotonicity_gap(trajectory, y, pair, time_points: int = 4) -> GapEstimate:
    """Estimate of ``E int_0^T [2<u - y, A(u) - A(y)> + sum_j |Pi B^j(u) - Pi B^j(y)|^2] dt``.

    ``u`` is read at ``kappa_2(t)``; the comparison process ``y`` (coefficients
    on the same space and grid, shape ``(P, m + 1, dim)`` or ``(m + 1, dim)``)
    is read at the same nodes, so ``y = u`` gives exactly zero.
    """
    vals = trajectory.values
    if vals.ndim == 2:
        vals = vals[None]
    y = np.asarray(y, dtype=float)
    if y.ndim == 2:
        y = np.broadcast_to(y, vals.shape)
    if y.shape != vals.shape:
        raise ValueError(f"comparison process shape {y.shape} != trajectory shape {vals.shape}")
    ok = getattr(trajectory, "ok", np.ones(vals.shape[0], bool))
    ok = np.atleast_1d(ok)
    vals, y = vals[ok], y[ok]
    grid, space = trajectory.grid, trajectory.space
    nodes = grid.nodes
    xg, wg = leggauss(time_points)
    P = vals.shape[0]
    total = np.zeros(P)
    autonomous = getattr(pair, "autonomous", False)
    for i in range(grid.m):
        U = vals[:, i + 1]
        Yv = y[:, i + 1]
        if np.array_equal(U, Yv):
            continue
        a, b = nodes[i], nodes[i + 1]
        times = [(0.5 * (a + b), b - a)] if autonomous else [(a + 0.5 * (b - a) * (x + 1), 0.5 * (b - a) * w)
                                                             for x, w in zip(xg, wg)]
        d = U - Yv
        for t, w in times:
            mono = 2.0 * np.einsum("pk,pk->p", d, pair.drift(space, t, U) - pair.drift(space, t, Yv))
            db = pair.diffusion(space, t, U) - pair.diffusion(space, t, Yv)
            total += w * (mono + np.einsum("prk,prk->p", db, db))
    mean, se = _mean_se(total)
    return GapEstimate(mean, se, P, total)


def oracle_on_grid(pair, space: DiscreteSpace, grid: TimeGrid, u0, seed: int, indices, level: int | None = None):
    """Exact OU paths at the grid nodes, in ``space`` coefficients, plus the coupled increments."""
    level = grid.m.bit_length() - 1 if level is None else level
    dW, aux = _draw(pair.r, grid.T, level, seed, indices, True)
    ospace = cached_space(Family.SPECTRAL_SINE.value, max(space.dim, 1), None, float(pair.p))
    oracle = OUOracle.from_pair(pair, initial_coefficients(ospace, u0), ospace.dim)
    if oracle.modes != ospace.dim:
        ospace = cached_space(Family.SPECTRAL_SINE.value, oracle.modes, None, float(pair.p))
    full = oracle.path(dW, aux, grid.T)
    step = 2**level // grid.m
    coarse = full[:, ::step]
    return embed(coarse, ospace, space), dW


# -- output ------------------------------------------------------------------------------------------


def rows_to_csv(rows: list[dict], path=None) -> str:
    """Comma-separated, header row, LF endings; floats written with ``repr``."""
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "stochmono"
    return plt


def ladder_svg(report: LadderReport, path) -> None:
    """Log-log chart of error^2 against delta."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    d = [lv.delta for lv in report.levels]
    e = [lv.strong_h_error_sq for lv in report.levels]
    s = [2 * lv.strong_h_error_se if np.isfinite(lv.strong_h_error_se) else 0.0 for lv in report.levels]
    ax.errorbar(d, e, yerr=s, marker="o", capsize=3)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("delta")
    ax.set_ylabel("E|u(T) - u_ref(T)|^2")
    if report.slope_sq is not None:
        ax.set_title(f"slope {report.slope_sq:.2f} vs {report.reference}")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def stability_svg(cells: list[StabilityCell], path) -> None:
    """Heat grid of stable (1) / unstable (0) cells over ``(n, m)``."""
    plt = _pyplot()
    ns = sorted({c.n for c in cells})
    ms = sorted({c.m for c in cells})
    grid = np.full((len(ns), len(ms)), np.nan)
    for c in cells:
        grid[ns.index(c.n), ms.index(c.m)] = float(c.stable)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.imshow(grid, origin="lower", cmap="RdYlGn", vmin=0, vmax=1, aspect="auto")
    ax.set_xticks(range(len(ms)), [str(m) for m in ms])
    ax.set_yticks(range(len(ns)), [str(n) for n in ns])
    ax.set_xlabel("m")
    ax.set_ylabel("n")
    for c in cells:
        if c.predicted_stable is not None and c.predicted_stable != c.stable:
            ax.text(ms.index(c.m), ns.index(c.n), "x", ha="center", va="center")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def default_workers() -> int:
    return max(1, min(os.cpu_count() or 1, 4))
