"""Explicit and implicit Euler-type discretizations on Galerkin spaces.

Conventions (grid ``t_i = i T / m``, increments ``dW_i = W(t_{i+1}) - W(t_i)``):

* explicit: ``u(t_0) = u(t_1) = Pi_n u0`` and for ``1 <= i <= m-1``
  ``u_{i+1} = u_i + delta Atilde_i(u_i) + sum_j Btilde^j_i(u_i) dW^j_i``;
  both averages run over ``[t_{i-1}, t_i]``.
* implicit (time and space-time): ``u(t_0) = 0``,
  ``u_1 = Pi u0 + delta A_0(u_1)`` and
  ``u_{i+1} = u_i + delta A_i(u_{i+1}) + sum_j Btilde^j_i(u_i) dW^j_i``,
  with ``A_i`` the forward average over ``[t_i, t_{i+1}]``.

The batched core advances ``P`` paths at once; a path whose coefficients
overflow (or whose step solve fails, if requested) is frozen as aborted.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import noise as noise_mod
from .operators import AveragedOperators, ExampleFamily, _range
from .solver import MaxIterations, MonotoneProblem, SolverError, fd_jacobian, solve
from .spaces import DiscreteSpace, v_norm


class Scheme(str, Enum):
    EXPLICIT = "explicit"
    IMPLICIT_TIME = "implicit_time"
    IMPLICIT_SPACETIME = "implicit_spacetime"

    @classmethod
    def parse(cls, value) -> "Scheme":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"explicit_spacetime": "explicit", "implicit": "implicit_spacetime", "time": "implicit_time"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown scheme {value!r}") from None

    @property
    def implicit(self) -> bool:
        return self is not Scheme.EXPLICIT


class NonFinite(FloatingPointError):
    def __init__(self, step: int, message: str = ""):
        super().__init__(message or f"non-finite coefficients at step {step}")
        self.step = step


class SolverFailure(RuntimeError):
    def __init__(self, step: int, trace=None):
        super().__init__(f"step solve failed at step {step}")
        self.step = step
        self.trace = trace or []


@dataclass(frozen=True)
class TimeGrid:
    T: float
    m: int

    def __post_init__(self):
        if self.m < 1 or self.T <= 0:
            raise ValueError("need m >= 1 and T > 0")

    @property
    def delta(self) -> float:
        return self.T / self.m

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.m + 1) * self.delta

    def index(self, t: float) -> int:
        """Index ``i`` with ``t`` in ``[t_i, t_{i+1})``; ``m`` at ``t = T``."""
        if not -1e-14 <= t <= self.T * (1 + 1e-14):
            raise ValueError(f"t={t} outside [0, {self.T}]")
        i = int(np.floor(t / self.delta + 1e-12))
        return min(max(i, 0), self.m)


def kappa(grid: TimeGrid, t: float, which: int) -> float:
    """``kappa_1(t) = t_i`` and ``kappa_2(t) = t_{i+1}`` on ``(t_i, t_{i+1})``; both fix the nodes."""
    i = grid.index(t)
    ti = i * grid.delta
    if which == 1:
        return ti
    if which != 2:
        raise ValueError("which must be 1 or 2")
    return ti if abs(t - ti) <= 1e-12 * max(1.0, grid.T) else (i + 1) * grid.delta


@dataclass
class TrajectoryBatch:
    scheme: Scheme
    grid: TimeGrid
    space: DiscreteSpace
    values: np.ndarray  # (P, m + 1, dim)
    solver_iters: np.ndarray  # (P, m + 1)
    residuals: np.ndarray  # (P, m + 1)
    abort_step: np.ndarray  # (P,), -1 when finished
    abort_reason: list = field(default_factory=list)
    p: float = 2.0

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def ok(self) -> np.ndarray:
        return self.abort_step < 0

    @property
    def h_norms(self) -> np.ndarray:
        with np.errstate(over="ignore"):  # aborted paths may hold huge frozen values
            return np.linalg.norm(self.values, axis=-1)

    def v_norms(self, p: float | None = None) -> np.ndarray:
        with np.errstate(over="ignore"):
            return v_norm(self.space, self.values, self.p if p is None else p)

    def __getitem__(self, k: int) -> "Trajectory":
        return Trajectory(self.scheme, self.grid, self.space, self.values[k], self.solver_iters[k],
                          self.residuals[k], int(self.abort_step[k]), self.p)


@dataclass
class Trajectory:
    scheme: Scheme
    grid: TimeGrid
    space: DiscreteSpace
    values: np.ndarray  # (m + 1, dim)
    solver_iters: np.ndarray
    residuals: np.ndarray
    abort_step: int = -1
    p: float = 2.0

    @property
    def h_norms(self) -> np.ndarray:
        with np.errstate(over="ignore"):  # aborted paths may hold huge frozen values
            return np.linalg.norm(self.values, axis=-1)

    @property
    def v_norms(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return v_norm(self.space, self.values, self.p)

    def at(self, t: float) -> np.ndarray:
        """Stepwise-constant reading: the value at ``kappa_1(t)``."""
        return self.values[self.grid.index(t)]

    def to_csv(self, path=None) -> str:
        return trajectories_to_csv([self], path)


def trajectories_to_csv(trajs, path=None, path_ids=None) -> str:
    """CSV with columns step, time, c1..cn, h_norm, v_norm, solver_iters, residual (LF endings)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    dim = trajs[0].values.shape[-1]
    head = ["step", "time"] + [f"c{k + 1}" for k in range(dim)] + ["h_norm", "v_norm", "solver_iters", "residual"]
    w.writerow((["path"] if path_ids is not None else []) + head)
    for j, tr in enumerate(trajs):
        h, v = tr.h_norms, tr.v_norms
        for i, t in enumerate(tr.grid.nodes):
            row = [i, repr(float(t))] + [repr(float(c)) for c in tr.values[i]]
            row += [repr(float(h[i])), repr(float(v[i])), int(tr.solver_iters[i]), repr(float(tr.residuals[i]))]
            w.writerow(([path_ids[j]] if path_ids is not None else []) + row)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


# -- step helpers ----------------------------------------------------------------


def step_coercivity(pair, delta_avg_tau: float):
    """Constants ``(C1, C2)`` with ``<D(x), x> >= C1 |x|_V^p - C2`` for ``D = I - delta A``.

    ``delta_avg_tau`` is ``int tau`` over the step.  ``None`` when the pair
    does not expose the needed data.
    """
    if not isinstance(pair, ExampleFamily):
        return None
    c = delta_avg_tau * _range(pair.a)[0]
    if pair.p == 2.0:
        return (min(1.0, c), 0.0)
    return (c / (1.0 + 2.0 ** -pair.p), 0.0)


def _noise_term(Btil: np.ndarray, dw: np.ndarray) -> np.ndarray:
    return np.einsum("prk,pr->pk", Btil, dw)


def _as_increments(tree, r: int, m: int, P: int = 1) -> np.ndarray:
    if tree is None:
        return np.zeros((P, r, m))
    if isinstance(tree, noise_mod.WienerTree):
        return noise_mod.increments(tree, m)[None]
    dw = np.asarray(tree, dtype=float)
    if dw.ndim == 2:
        dw = dw[None]
    if dw.shape[1:] != (r, m):
        raise ValueError(f"increments must have shape (P, {r}, {m}), got {dw.shape}")
    return dw


def run_batch(scheme, space: DiscreteSpace, grid: TimeGrid, pair, U0, dW, *, tolerance: float = 1e-10,
              jacobian: str = "analytic", on_failure: str = "abort", check_norm_bound: bool = False,
              time_points: int = 4) -> TrajectoryBatch:
    """Advance ``P`` paths; ``U0`` is ``(P, dim)`` or ``(dim,)``, ``dW`` is ``(P, r, m)``."""
    scheme = Scheme.parse(scheme)
    m, delta = grid.m, grid.delta
    dW = np.asarray(dW, dtype=float)
    P = dW.shape[0]
    U0 = np.broadcast_to(np.asarray(U0, dtype=float), (P, space.dim))
    if dW.shape[1:] != (pair.r, m):
        raise ValueError(f"increments must have shape (P, {pair.r}, {m}), got {dW.shape}")
    avg = AveragedOperators(pair, space, m, grid.T, time_points)
    vals = np.full((P, m + 1, space.dim), np.nan)
    iters = np.zeros((P, m + 1), dtype=np.int64)
    resid = np.zeros((P, m + 1))
    abort = np.full(P, -1, dtype=np.int64)
    reasons = [""] * P
    live = np.arange(P)

    def kill(rows, step, why):
        nonlocal live
        for r_ in rows:
            abort[r_] = step
            reasons[r_] = why
            vals[r_, step:] = np.nan
        live = np.setdiff1d(live, rows)

    with np.errstate(over="ignore", invalid="ignore"):
        if scheme is Scheme.EXPLICIT:
            vals[:, 0] = U0
            vals[:, 1] = U0
            for i in range(1, m):
                if live.size == 0:
                    break
                U = vals[live, i]
                nxt = U + delta * avg.a_tilde(i, U) + _noise_term(avg.b_tilde(i, U), dW[live, :, i])
                bad = ~np.all(np.isfinite(nxt), axis=1)
                vals[live, i + 1] = nxt
                if bad.any():
                    kill(live[bad], i + 1, "nonfinite")
        else:
            vals[:, 0] = 0.0
            tau_int = _tau_integrals(pair, grid)
            for i in range(m):
                if live.size == 0:
                    break
                if i == 0:
                    Y = U0[live].copy()
                    X0 = Y
                else:
                    U = vals[live, i]
                    Y = U + _noise_term(avg.b_tilde(i, U), dW[live, :, i])
                    X0 = U
                bad = ~np.all(np.isfinite(Y), axis=1)
                if bad.any():
                    kill(live[bad], i + 1, "nonfinite")
                    keep = ~bad
                    Y, X0 = Y[keep], X0[keep]
                    if live.size == 0:
                        break
                prob = _step_problem(avg, i, Y, X0, delta, tolerance, jacobian, space, pair,
                                     tau_int[i] if check_norm_bound else None)
                try:
                    res = solve(prob)
                    X, its, rr = res.x, res.iterations, res.final_residual
                except SolverError as exc:
                    if on_failure == "raise":
                        raise SolverFailure(i + 1, getattr(exc, "history", [])) from exc
                    X, its, rr, failed = _solve_rowwise(prob)
                    if failed.any():
                        kill(live[failed], i + 1, "solver")
                        X, its, rr = X[~failed], its[~failed], rr[~failed]
                vals[live, i + 1] = X
                iters[live, i + 1] = its
                resid[live, i + 1] = rr
                bad = ~np.all(np.isfinite(X), axis=1)
                if bad.any():
                    kill(live[bad], i + 1, "nonfinite")
    return TrajectoryBatch(scheme, grid, space, vals, iters, resid, abort, reasons, getattr(pair, "p", 2.0))


def _tau_integrals(pair, grid: TimeGrid) -> np.ndarray:
    tau = getattr(pair, "time_factor", None)
    nodes = grid.nodes
    if tau is None:
        return np.full(grid.m, grid.delta)
    from numpy.polynomial.legendre import leggauss

    xg, wg = leggauss(4)
    out = np.empty(grid.m)
    for i in range(grid.m):
        a, b = nodes[i], nodes[i + 1]
        out[i] = 0.5 * (b - a) * float(np.sum(wg * tau(a + 0.5 * (b - a) * (xg + 1.0))))
    return out


def _step_problem(avg, i, Y, X0, delta, tolerance, jacobian, space, pair, tau_int):
    def apply_d(X):
        return X - delta * avg.a_fwd(i, X)

    jac = None
    if jacobian == "analytic" and hasattr(pair, "drift_jacobian"):
        def jac(X):
            J = avg.a_fwd_jacobian(i, X)
            return np.eye(X.shape[1]) - delta * J
    elif jacobian == "fd":
        jac = lambda X: fd_jacobian(apply_d, X)
    coer = step_coercivity(pair, tau_int) if tau_int is not None else None
    return MonotoneProblem(apply_d, Y, jac, 1.0, coer, tolerance, space if coer else None,
                           getattr(pair, "p", 2.0), x0=X0)


def _solve_rowwise(prob: MonotoneProblem):
    P = prob.y.shape[0]
    X = np.full_like(prob.y, np.nan)
    its = np.zeros(P, dtype=np.int64)
    rr = np.full(P, np.nan)
    failed = np.zeros(P, dtype=bool)
    for k in range(P):
        sub = MonotoneProblem(prob.apply_d, prob.y[k:k + 1], prob.jacobian, prob.strong_mono_const, None,
                              prob.tolerance, None, prob.p, prob.max_iter, prob.x0[k:k + 1])
        try:
            res = solve(sub)
            X[k], its[k], rr[k] = res.x[0], res.iterations, res.final_residual[0]
        except (SolverError, MaxIterations):
            failed[k] = True
    return X, its, rr, failed


# -- single-trajectory entry points ----------------------------------------------------


def _single(scheme, space, grid, pair, u0, tree, **kw) -> Trajectory:
    dW = _as_increments(tree, pair.r, grid.m)
    batch = run_batch(scheme, space, grid, pair, np.asarray(u0, float), dW, on_failure="raise", **kw)
    tr = batch[0]
    if tr.abort_step >= 0:
        raise NonFinite(tr.abort_step)
    return tr


def run_explicit(space: DiscreteSpace, grid: TimeGrid, pair, u0, tree=None, **kw) -> Trajectory:
    """Explicit space-time scheme; raises :class:`NonFinite` on overflow."""
    return _single(Scheme.EXPLICIT, space, grid, pair, u0, tree, **kw)


def run_implicit_time(fine_space: DiscreteSpace, grid: TimeGrid, pair, u0, tree=None, **kw) -> Trajectory:
    """Implicit time scheme realized on a fine reference space."""
    return _single(Scheme.IMPLICIT_TIME, fine_space, grid, pair, u0, tree, **kw)


def run_implicit_spacetime(space: DiscreteSpace, grid: TimeGrid, pair, u0, tree=None, **kw) -> Trajectory:
    """Implicit space-time scheme on ``V_n``."""
    return _single(Scheme.IMPLICIT_SPACETIME, space, grid, pair, u0, tree, **kw)


DEFAULT_N_REF = 128
