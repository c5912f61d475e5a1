"""Batched solver for ``D(x) = y`` with ``D`` strongly monotone in the H inner product.

Damped Newton with backtracking on ``0.5 |D(x) - y|^2``; rows whose line
search stalls switch to the relaxation ``x <- x - tau (D(x) - y)``, which
always makes progress for a strongly monotone Lipschitz field.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .spaces import DiscreteSpace, dual_norm, v_norm

DEFAULT_TOL = 1e-10
NONMONO_TOL = 1e-9


class SolverError(RuntimeError):
    pass


class MaxIterations(SolverError):
    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


class NonMonotoneDetected(SolverError):
    pass


@dataclass
class MonotoneProblem:
    """``D(x) = y`` on coefficient vectors; ``apply_d`` maps ``(P, n) -> (P, n)``.

    ``jacobian`` returns ``(P, n, n)`` or a shared ``(n, n)`` matrix; when
    absent, forward differences are used.  ``coercivity = (C1, C2)`` enables
    the a priori norm bound check, which needs ``space`` and ``p``.
    """

    apply_d: Callable
    y: np.ndarray
    jacobian: Callable | None = None
    strong_mono_const: float = 1.0
    coercivity: tuple | None = None
    tolerance: float = DEFAULT_TOL
    space: DiscreteSpace | None = None
    p: float = 2.0
    max_iter: int = 60
    x0: np.ndarray | None = None


@dataclass
class SolveResult:
    x: np.ndarray
    iterations: int
    final_residual: np.ndarray | float
    norm_bound_ok: bool | None = None
    norm_margin: np.ndarray | float | None = None
    relaxation_steps: int = 0
    trace: list = field(default_factory=list)


def fd_jacobian(apply_d: Callable, X: np.ndarray, DX: np.ndarray | None = None) -> np.ndarray:
    """Forward differences with step ``1e-6 (1 + |x_k|)``."""
    P, n = X.shape
    DX = apply_d(X) if DX is None else DX
    J = np.empty((P, n, n))
    for k in range(n):
        h = 1e-6 * (1.0 + np.abs(X[:, k]))
        Xh = X.copy()
        Xh[:, k] += h
        J[:, :, k] = (apply_d(Xh) - DX) / h[:, None]
    return J


def _newton_step(J, R):
    if J.ndim == 2:
        return -lu_solve(lu_factor(J), R.T).T
    return -np.linalg.solve(J, R[..., None])[..., 0]


def solve(problem: MonotoneProblem, x0=None) -> SolveResult:
    """Solve the batch; raise :class:`MaxIterations` if any row misses the tolerance."""
    Y = np.asarray(problem.y, dtype=float)
    single = Y.ndim == 1
    Y = np.atleast_2d(Y)
    start = x0 if x0 is not None else problem.x0
    X = np.array(np.broadcast_to(Y if start is None else np.atleast_2d(np.asarray(start, float)), Y.shape))
    D = problem.apply_d
    R = D(X) - Y
    res = np.linalg.norm(R, axis=1)
    tol = problem.tolerance
    trace = [(0, float(res.max()), 0.0)]
    relax = 0
    it = 0
    while np.any(res > tol):
        if it >= problem.max_iter:
            raise MaxIterations(f"residual {res.max():.3e} > {tol:.1e} after {it} iterations", trace)
        it += 1
        act = np.flatnonzero(res > tol)
        Xa, Ra = X[act], R[act]
        J = problem.jacobian(Xa) if problem.jacobian is not None else fd_jacobian(D, Xa, Ra + Y[act])
        step = _newton_step(J, Ra)
        merit = 0.5 * res[act] ** 2
        t = np.ones(act.size)
        pending = np.ones(act.size, dtype=bool)
        Xn, Rn = Xa.copy(), Ra.copy()
        for _ in range(25):
            idx = np.flatnonzero(pending)
            trial = Xa[idx] + t[idx, None] * step[idx]
            Rt = D(trial) - Y[act[idx]]
            ok = 0.5 * np.einsum("pk,pk->p", Rt, Rt) <= merit[idx] * (1.0 - 2e-4 * t[idx])
            ok |= np.linalg.norm(Rt, axis=1) <= tol
            Xn[idx[ok]], Rn[idx[ok]] = trial[ok], Rt[ok]
            pending[idx[ok]] = False
            t[idx[~ok]] *= 0.5
            if not pending.any():
                break
        if pending.any():
            # line search stalled: monotone relaxation on those rows
            idx = np.flatnonzero(pending)
            relax += 1
            Xn[idx], Rn[idx] = _relax(D, Xa[idx], Ra[idx], Y[act[idx]])
        _check_monotone(Xa, Ra, Xn, Rn)
        X[act], R[act] = Xn, Rn
        res[act] = np.linalg.norm(Rn, axis=1)
        trace.append((it, float(res.max()), float(t.min())))
    out = SolveResult(X[0] if single else X, it, float(res[0]) if single else res, relaxation_steps=relax, trace=trace)
    if problem.coercivity is not None and problem.space is not None:
        ok, margin = verify_norm_bound(problem, out)
        out.norm_bound_ok, out.norm_margin = ok, margin
    return out


def _relax(D, X, R, Y, max_halvings: int = 60):
    merit = np.einsum("pk,pk->p", R, R)
    tau = np.ones(X.shape[0])
    Xn, Rn = X.copy(), R.copy()
    pending = np.ones(X.shape[0], dtype=bool)
    for _ in range(max_halvings):
        idx = np.flatnonzero(pending)
        trial = X[idx] - tau[idx, None] * R[idx]
        Rt = D(trial) - Y[idx]
        ok = np.einsum("pk,pk->p", Rt, Rt) < merit[idx]
        Xn[idx[ok]], Rn[idx[ok]] = trial[ok], Rt[ok]
        pending[idx[ok]] = False
        tau[idx[~ok]] *= 0.5
        if not pending.any():
            break
    return Xn, Rn


def _check_monotone(X, R, Xn, Rn):
    dx = Xn - X
    gap = np.einsum("pk,pk->p", Rn - R, dx)
    bad = gap < -NONMONO_TOL * np.einsum("pk,pk->p", dx, dx)
    if bad.any():
        raise NonMonotoneDetected(f"<D(x+) - D(x), x+ - x> = {gap[bad].min():.3e} < 0")


def norm_bound(c1: float, c2: float, y_dual: np.ndarray | float) -> np.ndarray | float:
    """A priori bound on ``|x|_V^p`` for the solution of ``D(x) = y``."""
    return (c1 + 2.0 * c2) / c1 + np.asarray(y_dual) ** 2 / c1**2


def verify_norm_bound(problem: MonotoneProblem, result: SolveResult):
    """Return ``(all ok, margin = bound - |x|_V^p)``."""
    c1, c2 = problem.coercivity
    space = problem.space
    x = np.atleast_2d(result.x)
    y = np.atleast_2d(problem.y)
    value = v_norm(space, x, problem.p) ** problem.p
    margin = norm_bound(c1, c2, dual_norm(space, y, problem.p)) - value
    if np.ndim(result.x) == 1:
        margin = float(margin[0])
    return bool(np.all(np.asarray(margin) >= 0.0)), margin


@dataclass
class WindowReport:
    integrals: np.ndarray
    ok: np.ndarray

    @property
    def all_coercive(self) -> bool:
        return bool(self.ok.all())


def wellposedness_window(constants, grid) -> WindowReport:
    """Per-step test ``int_{t_i}^{t_{i+1}} K1 < 2``."""
    nodes = grid.nodes
    vals = np.array([constants.integral("k1", float(a), float(b)) for a, b in zip(nodes[:-1], nodes[1:])])
    return WindowReport(vals, vals < 2.0)
