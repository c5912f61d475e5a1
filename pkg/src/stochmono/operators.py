"""Drift/diffusion pairs ``(A, B)`` on ``(0, 1)`` and their Galerkin assembly.

The shipped family is the divergence-form operator

    A_t(u) = d/dx [ tau(t) a(x) |u'|^{p-2} u' ]
    B^k_t(u) = (2/p) sqrt(tau(t)) b_k(x) |u'|^{p/2} + c_k(x) |u| + d_k(x)

with ``tau`` a scalar time factor.  ``make_linear_heat`` is the ``p = 2``,
``b = c = 0`` member with sine-mode additive noise.

All evaluators work on batches: coefficient arrays of shape ``(P, dim)``.
Pairings ``<A_t(u), e_k>`` are computed by quadrature after integration by
parts, so the returned vector is also the coefficient vector of ``Pi_n A_t(u)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import integrate

from . import kernels
from .spaces import DiscreteSpace, dual_norm

_X_PROBE = np.linspace(0.0, 1.0, 1025)
TIME_GAUSS_POINTS = 4


class HypothesisError(ValueError):
    """Operator family outside the structural hypotheses."""


# -- coefficient profiles ------------------------------------------------------
# Small callable classes rather than lambdas so pairs can be pickled to workers.


@dataclass(frozen=True)
class Constant:
    value: float

    def __call__(self, x):
        return np.full(np.shape(x), float(self.value))


@dataclass(frozen=True)
class SineMode:
    """``amplitude * sqrt(2) * sin(k pi x)``."""

    k: int
    amplitude: float = 1.0

    def __call__(self, x):
        return self.amplitude * np.sqrt(2.0) * np.sin(self.k * np.pi * np.asarray(x))


@dataclass(frozen=True)
class SeededField:
    """Positive random field ``mean * (1 + amplitude * sum_k xi_k sin(k pi x) / k^2)``.

    ``xi_k ~ U(-1, 1)`` is drawn per trajectory from ``(seed, key)``; until
    :meth:`realize` is called the field evaluates to its mean.  Bounds hold
    for every realization, so structural constants are realization-free.
    """

    mean: float
    amplitude: float
    modes: int = 4
    seed: int = 0
    xi: tuple | None = None

    def __post_init__(self):
        if self.amplitude * self._s >= 1.0:
            raise ValueError("field amplitude too large: positivity not guaranteed")

    @property
    def _s(self) -> float:
        return float(np.sum(1.0 / np.arange(1, self.modes + 1) ** 2))

    def realize(self, key: int) -> "SeededField":
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=(7, int(key)))))
        return replace(self, xi=tuple(rng.uniform(-1.0, 1.0, self.modes)))

    def bounds(self) -> tuple[float, float]:
        s = self.amplitude * self._s
        return self.mean * (1.0 - s), self.mean * (1.0 + s)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.xi is None:
            return np.full(x.shape, float(self.mean))
        k = np.arange(1, self.modes + 1)
        pert = np.sin(np.multiply.outer(x, k) * np.pi) @ (np.asarray(self.xi) / k**2)
        return self.mean * (1.0 + self.amplitude * pert)


@dataclass(frozen=True)
class UnitFactor:
    def __call__(self, t):
        return np.ones_like(np.asarray(t, dtype=float))


@dataclass(frozen=True)
class RampFactor:
    """``tau(t) = t / scale``: degenerate coercivity as ``t -> 0``."""

    scale: float = 1.0

    def __call__(self, t):
        return np.asarray(t, dtype=float) / self.scale


def _as_profile(c) -> Callable:
    if c is None:
        return Constant(0.0)
    if callable(c):
        return c
    return Constant(float(c))


def _range(c) -> tuple[float, float]:
    if hasattr(c, "bounds"):
        return c.bounds()
    v = np.asarray(c(_X_PROBE), dtype=float)
    return float(v.min()), float(v.max())


def _fine_integral(fn, elements: int = 128, points: int = 10) -> float:
    xg, wg = leggauss(points)
    left = np.arange(elements)[:, None] / elements
    x = (left + 0.5 * (xg + 1.0) / elements).ravel()
    w = np.tile(0.5 * wg / elements, elements)
    return float(np.asarray(fn(x)) @ w)


def _is_zero(c) -> bool:
    return isinstance(c, Constant) and c.value == 0.0


# -- structural constants ------------------------------------------------------


@dataclass(frozen=True)
class ScaledFunction:
    """``t -> offset + slope * tau(t)``."""

    tau: Callable
    slope: float
    offset: float = 0.0

    def __call__(self, t):
        return self.offset + self.slope * self.tau(t)


@dataclass(frozen=True)
class StructuralConstants:
    """Constants of the coercivity and growth conditions.

    ``lambda_fn``, ``k1_fn``, ``k1bar_fn``, ``k2_fn`` map time to floats.
    """

    p: float
    alpha: float
    lambda_fn: Callable
    k1_fn: Callable
    k1bar_fn: Callable
    k2_fn: Callable

    @property
    def q(self) -> float:
        return self.p / (self.p - 1.0)

    def k3(self, t):
        return self.k1bar_fn(t) + (2.0 / self.q) * self.k2_fn(t)

    def integral(self, name: str, a: float, b: float) -> float:
        fn = {"lambda": self.lambda_fn, "k1": self.k1_fn, "k1bar": self.k1bar_fn, "k2": self.k2_fn, "k3": self.k3}[name]
        val, _ = integrate.quad(lambda s: float(fn(s)), a, b, limit=200)
        return val

    def integrals(self, T: float) -> dict[str, float]:
        """Integrals over ``[0, T]``; all must be finite."""
        out = {name: self.integral(name, 0.0, T) for name in ("lambda", "k1", "k1bar", "k2")}
        if not all(np.isfinite(v) for v in out.values()):
            raise HypothesisError(f"non-integrable structural constant: {out}")
        return out


# -- operator pairs ------------------------------------------------------------


def _batch(U) -> tuple[np.ndarray, bool]:
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        return U[None, :], True
    return U, False


@dataclass(frozen=True, eq=False)
class ExampleFamily:
    """Stochastic p-Laplacian pair on ``(0, 1)``.

    Parameters
    ----------
    p : float
        Growth exponent, ``p >= 2``.
    a : float or callable
        Drift coefficient ``a(x) > 0``.
    b, c, d : sequences of length ``r``
        Gradient, state, and additive noise coefficients (floats or callables
        of ``x``).
    epsilon : float
        Margin in the positivity matrix ``2(p-1) a - (1+eps) sum_k b_k^2``.
    time_factor : callable
        ``tau(t)`` multiplying ``a`` and ``b**2``.
    validate : bool
        Reject coefficient sets violating the positivity condition.
    """

    p: float
    a: Callable
    b: tuple
    c: tuple
    d: tuple
    epsilon: float = 0.1
    time_factor: Callable = field(default_factory=UnitFactor)
    T: float = 1.0
    validate: bool = True
    name: str = "example"

    def __post_init__(self):
        r = max(len(self.b), len(self.c), len(self.d), 1)
        pad = lambda seq: tuple(_as_profile(v) for v in tuple(seq) + (0.0,) * (r - len(seq)))
        object.__setattr__(self, "a", _as_profile(self.a))
        object.__setattr__(self, "b", pad(self.b))
        object.__setattr__(self, "c", pad(self.c))
        object.__setattr__(self, "d", pad(self.d))
        if self.p < 2:
            raise HypothesisError("p must be >= 2")
        if self.epsilon <= 0:
            raise HypothesisError("epsilon must be positive")
        lam = self.positivity_lambda0
        if self.validate and lam < -1e-12:
            raise HypothesisError(f"positivity matrix has eigenvalue {lam:.3e} < 0")
        if self.validate and (_range(self.a)[0] <= 0 or self.coercive_lambda0 <= 0):
            raise HypothesisError("degenerate drift coefficient")
        object.__setattr__(self, "_constants", self._build_constants())

    # structure flags
    @property
    def r(self) -> int:
        return len(self.b)

    @property
    def has_g(self) -> bool:
        return not all(_is_zero(v) for v in self.b)

    @property
    def has_c(self) -> bool:
        return not all(_is_zero(v) for v in self.c)

    @property
    def has_d(self) -> bool:
        return not all(_is_zero(v) for v in self.d)

    @property
    def additive(self) -> bool:
        return not (self.has_g or self.has_c)

    @property
    def linear(self) -> bool:
        return self.p == 2.0

    @property
    def autonomous(self) -> bool:
        return isinstance(self.time_factor, UnitFactor)

    @property
    def noise_dependence(self) -> str:
        fields = (self.a,) + self.b + self.c + self.d
        return "path-dependent" if any(isinstance(f, SeededField) for f in fields) else "deterministic"

    @property
    def constants(self) -> StructuralConstants:
        return self._constants

    def realize(self, key: int) -> "ExampleFamily":
        """Freeze any seeded coefficient fields for trajectory ``key``."""
        if self.noise_dependence == "deterministic":
            return self
        fix = lambda f: f.realize(key) if isinstance(f, SeededField) else f
        return replace(self, a=fix(self.a), b=tuple(map(fix, self.b)), c=tuple(map(fix, self.c)), d=tuple(map(fix, self.d)))

    # -- constants ------------------------------------------------------------
    def _bsq_max(self) -> float:
        return float(sum(max(abs(lo), abs(hi)) ** 2 for lo, hi in map(_range, self.b)))

    def _bsq_probe(self) -> np.ndarray:
        return sum(np.asarray(f(_X_PROBE)) ** 2 for f in self.b)

    @property
    def positivity_lambda0(self) -> float:
        """``min_x [2(p-1) a - (1+eps) sum_k b_k^2]`` at ``tau = 1``."""
        a_lo = _range(self.a)[0]
        if isinstance(self.a, SeededField) or any(isinstance(f, SeededField) for f in self.b):
            return 2 * (self.p - 1) * a_lo - (1 + self.epsilon) * self._bsq_max()
        m = 2 * (self.p - 1) * np.asarray(self.a(_X_PROBE)) - (1 + self.epsilon) * self._bsq_probe()
        return float(m.min())

    def positivity_lambda(self, t) -> float:
        return self.time_factor(t) * self.positivity_lambda0

    def positivity_matrix(self, t, x) -> np.ndarray:
        """Scalar (d = 1) positivity matrix at the given points."""
        tau = self.time_factor(t)
        return tau * (2 * (self.p - 1) * np.asarray(self.a(x)) - (1 + self.epsilon) * sum(np.asarray(f(x)) ** 2 for f in self.b))

    @property
    def _g_factor(self) -> float:
        return 1.0 + self.epsilon if (self.has_g and (self.has_c or self.has_d)) else 1.0

    @property
    def _h_factor(self) -> float:
        return 1.0 + 1.0 / self.epsilon if (self.has_g and (self.has_c or self.has_d)) else 1.0

    @property
    def coercive_lambda0(self) -> float:
        """Coercivity weight ``lambda(t) / tau(t)`` for the chosen V-norm."""
        gf = self._g_factor * 4.0 / self.p**2
        if isinstance(self.a, SeededField) or any(isinstance(f, SeededField) for f in self.b):
            cmin = 2 * _range(self.a)[0] - gf * self._bsq_max()
        else:
            cmin = float((2 * np.asarray(self.a(_X_PROBE)) - gf * self._bsq_probe()).min())
        if self.p == 2.0:
            return cmin
        # |v|_p <= |v|_inf <= |v'|_1 / 2 <= |v'|_p / 2 on (0, 1)
        return cmin / (1.0 + 2.0 ** -self.p)

    @property
    def monotonicity_k(self) -> float:
        """Constant ``K`` of the weakened monotonicity condition (0 if it holds exactly)."""
        if not self.has_c:
            return 0.0
        csq = float(sum(max(abs(lo), abs(hi)) ** 2 for lo, hi in map(_range, self.c)))
        return (1.0 + 1.0 / self.epsilon if self.has_g else 1.0) * csq

    def _build_constants(self) -> StructuralConstants:
        hf = self._h_factor
        both = self.has_c and self.has_d
        csq = float(sum(max(abs(lo), abs(hi)) ** 2 for lo, hi in map(_range, self.c)))
        dsq = float(sum(_fine_integral(lambda x: np.asarray(f(x)) ** 2) if not isinstance(f, SeededField)
                        else max(abs(v) for v in f.bounds()) ** 2 for f in self.d))
        k1_h = hf * (2.0 if both else 1.0) * csq
        k1bar = hf * (2.0 if both else 1.0) * dsq
        lam0 = self.coercive_lambda0
        a_hi = _range(self.a)[1]
        q = self.p / (self.p - 1.0)
        alpha = max(1.0, (a_hi / lam0) ** q) if lam0 > 0 else math.inf
        lam_fn = ScaledFunction(self.time_factor, lam0)
        k1_fn = ScaledFunction(self.time_factor, lam0, k1_h) if self.p == 2.0 else ScaledFunction(self.time_factor, 0.0, k1_h)
        return StructuralConstants(self.p, alpha, lam_fn, k1_fn, ScaledFunction(self.time_factor, 0.0, k1bar), ScaledFunction(self.time_factor, 0.0, 0.0))

    # -- quadrature tables -----------------------------------------------------
    def _nodes(self, space: DiscreteSpace):
        return _coef_tables(self, space)

    # -- evaluators ------------------------------------------------------------
    def drift(self, space: DiscreteSpace, t: float, U) -> np.ndarray:
        """Pairings ``<A_t(u), e_k>`` for a batch of coefficient vectors."""
        U, single = _batch(U)
        tau = float(self.time_factor(t))
        tab = self._nodes(space)
        if self.linear:
            out = -tau * (U @ tab.stiff_a)
        else:
            z = np.ascontiguousarray(U @ space.derivs.T)
            flux, _ = kernels.power_flux(z, tab.aw[None, :], self.p)
            out = -tau * (flux @ space.derivs)
        return out[0] if single else out

    def drift_jacobian(self, space: DiscreteSpace, t: float, U) -> np.ndarray:
        """Jacobian of the pairing vector; a shared ``(dim, dim)`` matrix when linear."""
        tau = float(self.time_factor(t))
        tab = self._nodes(space)
        if self.linear:
            return -tau * tab.stiff_a
        U, single = _batch(U)
        z = np.ascontiguousarray(U @ space.derivs.T)
        _, dflux = kernels.power_flux(z, tab.aw[None, :], self.p)
        jac = -tau * kernels.weighted_gram(tab.derivs_c, np.ascontiguousarray(dflux))
        return jac[0] if single else jac

    def diffusion_profile(self, space: DiscreteSpace, t: float, U) -> np.ndarray:
        """``B^k_t(u)`` sampled at the quadrature nodes, shape ``(P, r, nq)``."""
        U, single = _batch(U)
        tab = self._nodes(space)
        P = U.shape[0]
        out = np.broadcast_to(tab.d, (P,) + tab.d.shape).copy()
        if self.has_g:
            z = U @ space.derivs.T
            sq = np.sqrt(float(self.time_factor(t)))
            out += (2.0 / self.p) * sq * tab.b[None, :, :] * (np.abs(z) ** (self.p / 2.0))[:, None, :]
        if self.has_c:
            u = U @ space.values.T
            out += tab.c[None, :, :] * np.abs(u)[:, None, :]
        return out[0] if single else out

    def diffusion(self, space: DiscreteSpace, t: float, U) -> np.ndarray:
        """Coefficients of ``Pi_n B^k_t(u)``, shape ``(P, r, dim)``."""
        U, single = _batch(U)
        tab = self._nodes(space)
        if self.additive:
            out = np.broadcast_to(tab.d_proj, (U.shape[0],) + tab.d_proj.shape)
        else:
            out = self.diffusion_profile(space, t, U) @ tab.wvalues
        return out[0] if single else out


@dataclass(frozen=True)
class _Tables:
    aw: np.ndarray
    stiff_a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    d_proj: np.ndarray
    wvalues: np.ndarray
    derivs_c: np.ndarray


@lru_cache(maxsize=64)
def _coef_tables(pair: ExampleFamily, space: DiscreteSpace) -> _Tables:
    x = space.quadrature.nodes
    w = space.quadrature.weights
    a = np.asarray(pair.a(x), dtype=float)
    aw = a * w
    stiff = (space.derivs * aw[:, None]).T @ space.derivs
    b = np.array([np.asarray(f(x), dtype=float) for f in pair.b])
    c = np.array([np.asarray(f(x), dtype=float) for f in pair.c])
    d = np.array([np.asarray(f(x), dtype=float) for f in pair.d])
    wvalues = space.values * w[:, None]
    tabs = _Tables(aw, stiff, b, c, d, d @ wvalues, wvalues, np.ascontiguousarray(space.derivs))
    for arr in vars(tabs).values():
        arr.setflags(write=False)
    return tabs


def make_linear_heat(mu_scale: float = 1.0, sigma: Sequence[float] = (), T: float = 1.0, time_factor=None) -> ExampleFamily:
    """``A(u) = mu u''``, ``B^j = sigma_j sqrt(2) sin(j pi x)``.

    Constants: ``p = 2``, ``lambda = K1 = 2 mu``, ``K1bar = sum sigma_j^2``,
    ``K2 = 0``, ``alpha = 1``.
    """
    if mu_scale <= 0:
        raise HypothesisError("mu_scale must be positive")
    sigma = tuple(float(s) for s in sigma) or (0.0,)
    d = tuple(SineMode(j + 1, s) if s != 0 else 0.0 for j, s in enumerate(sigma))
    return ExampleFamily(2.0, mu_scale, (), (), d, T=T, time_factor=time_factor or UnitFactor(), name="linear_heat")


def make_example_family(p, a=1.0, b=(), c=(), d=(), epsilon: float = 0.1, T: float = 1.0, time_factor=None,
                        validate: bool = True) -> ExampleFamily:
    """Stochastic p-Laplacian pair with ``lambda`` extracted from the positivity matrix."""
    return ExampleFamily(float(p), a, tuple(b), tuple(c), tuple(d), epsilon=epsilon, T=T,
                         time_factor=time_factor or UnitFactor(), validate=validate)


# -- wrappers --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FlippedDrift:
    """``(-A, B)``: anti-dissipative drift, outside the monotonicity hypothesis."""

    base: ExampleFamily

    def __getattr__(self, name):
        if name == "base":
            raise AttributeError(name)
        return getattr(self.base, name)

    def drift(self, space, t, U):
        return -self.base.drift(space, t, U)

    def drift_jacobian(self, space, t, U):
        return -self.base.drift_jacobian(space, t, U)


@dataclass(frozen=True, eq=False)
class RescaledPair:
    """Exponential rescaling turning the weakened monotonicity condition into the strict one.

    With ``gamma_t = exp(K t / 2)`` for constant ``K``:
    ``A'_t(x) = A_t(gamma x) / gamma - K x / 2`` and ``B'_t(x) = B_t(gamma x) / gamma``.
    """

    base: ExampleFamily
    k: float

    def __getattr__(self, name):
        if name == "base":
            raise AttributeError(name)
        return getattr(self.base, name)

    def gamma(self, t) -> float:
        return float(np.exp(0.5 * self.k * t))

    def drift(self, space, t, U):
        g = self.gamma(t)
        return self.base.drift(space, t, g * np.asarray(U)) / g - 0.5 * self.k * np.asarray(U)

    def drift_jacobian(self, space, t, U):
        g = self.gamma(t)
        jac = self.base.drift_jacobian(space, t, g * np.asarray(U))
        return jac - 0.5 * self.k * np.eye(space.dim)

    def diffusion_profile(self, space, t, U):
        g = self.gamma(t)
        return self.base.diffusion_profile(space, t, g * np.asarray(U)) / g

    def diffusion(self, space, t, U):
        g = self.gamma(t)
        return self.base.diffusion(space, t, g * np.asarray(U)) / g


# -- assembly entry points -----------------------------------------------------------


def assemble_drift(pair, space: DiscreteSpace, t: float, u) -> np.ndarray:
    """Coefficients of ``Pi_n A_t(u)``."""
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise FloatingPointError("non-finite coefficients passed to drift assembly")
    return pair.drift(space, t, u)


def assemble_diffusion(pair, space: DiscreteSpace, t: float, u, j: int) -> np.ndarray:
    """Coefficients of ``Pi_n B^j_t(u)``."""
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise FloatingPointError("non-finite coefficients passed to diffusion assembly")
    return pair.diffusion(space, t, u)[..., j, :]


# -- time averages ---------------------------------------------------------------------


def _gauss_unit(npts: int = TIME_GAUSS_POINTS):
    xg, wg = leggauss(npts)
    return 0.5 * (xg + 1.0), 0.5 * wg


@dataclass(frozen=True, eq=False)
class AveragedOperators:
    """Step averages of ``A`` and ``B`` on the grid ``t_i = i T / m``.

    ``a_tilde(i)`` and ``b_tilde(i)`` average over ``[t_{i-1}, t_i]`` (zero at
    ``i = 0``); ``a_fwd(i)`` averages over ``[t_i, t_{i+1}]``.  Inner time
    integrals use a fixed Gauss rule, skipped for autonomous pairs.
    """

    pair: object
    space: DiscreteSpace
    m: int
    T: float = 1.0
    time_points: int = TIME_GAUSS_POINTS

    @property
    def delta(self) -> float:
        return self.T / self.m

    def _interval(self, i: int, which: str) -> tuple[float, float] | None:
        if not 0 <= i <= self.m:
            raise IndexError(f"step index {i} outside 0..{self.m}")
        if which == "backward":
            return None if i == 0 else ((i - 1) * self.delta, i * self.delta)
        if which == "forward":
            if i == self.m:
                raise IndexError("forward average undefined at i = m")
            return (i * self.delta, (i + 1) * self.delta)
        raise ValueError(f"unknown average {which!r}")

    def _times(self, lo: float, hi: float):
        if self.pair.autonomous:
            return np.array([0.5 * (lo + hi)]), np.array([1.0])
        s, w = _gauss_unit(self.time_points)
        return lo + (hi - lo) * s, w

    def _average(self, fn, i, which, U, zero_shape):
        span = self._interval(i, which)
        if span is None:
            return np.zeros(zero_shape)
        times, weights = self._times(*span)
        acc = None
        for t, w in zip(times, weights):
            val = w * fn(self.space, float(t), U)
            acc = val if acc is None else acc + val
        return acc

    def a_tilde(self, i: int, U) -> np.ndarray:
        return self._average(self.pair.drift, i, "backward", U, np.shape(U))

    def a_fwd(self, i: int, U) -> np.ndarray:
        return self._average(self.pair.drift, i, "forward", U, np.shape(U))

    def a_fwd_jacobian(self, i: int, U) -> np.ndarray:
        return self._average(self.pair.drift_jacobian, i, "forward", U, None)

    def b_tilde(self, i: int, U) -> np.ndarray:
        shape = np.shape(U)[:-1] + (self.pair.r, self.space.dim)
        return self._average(self.pair.diffusion, i, "backward", U, shape)


def average_drift(avg: AveragedOperators, i: int, u, which: str = "backward") -> np.ndarray:
    return avg.a_tilde(i, u) if which == "backward" else avg.a_fwd(i, u) if which == "forward" else avg._interval(i, which)


# -- condition checks -------------------------------------------------------------------


@dataclass
class ConditionResult:
    name: str
    worst_margin: float
    violations: int
    n_samples: int
    worst_sample: dict
    note: str = ""

    @property
    def passed(self) -> bool:
        return self.violations == 0


@dataclass
class ConditionReport:
    results: dict[str, ConditionResult]
    seed: int
    tolerance: float
    note: str = ("growth uses the V_n-restricted dual norm: a violation is a true violation, "
                 "a pass is evidence only")

    def __getitem__(self, key) -> ConditionResult:
        return self.results[key]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def rows(self) -> list[dict]:
        return [{"condition": r.name, "samples": r.n_samples, "violations": r.violations,
                 "worst_margin": r.worst_margin, "worst_t": r.worst_sample.get("t", float("nan"))}
                for r in self.results.values()]


def sample_pairs(space: DiscreteSpace, n_samples: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random coefficient pairs with entries ``N(0, k^-2)``."""
    scale = 1.0 / np.arange(1, space.dim + 1)
    x = rng.standard_normal((n_samples, space.dim)) * scale
    y = rng.standard_normal((n_samples, space.dim)) * scale
    return x, y


def _h_sq(space: DiscreteSpace, profile: np.ndarray) -> np.ndarray:
    """``sum_j |B^j|_H^2`` from node samples ``(P, r, nq)``."""
    return (profile**2).sum(axis=1) @ space.quadrature.weights


def check_conditions(pair, space: DiscreteSpace, n_samples: int = 1000, seed: int = 0, *,
                     k_fn: Callable | None = None, conditions: Sequence[str] = ("C1", "C2", "C4", "R1"),
                     tolerance: float = 1e-8, T: float | None = None, x=None, y=None, t=None,
                     chunk: int = 2000) -> ConditionReport:
    """Sampled margins of the structural inequalities.

    Margins are ``left - right``; a sample violates when the margin exceeds
    ``tolerance * (1 + sum of |terms|)``.  ``"C1"`` checks plain monotonicity,
    or the weakened form with ``k_fn(t) |x - y|_H^2`` on the right when
    ``k_fn`` is given.  ``"R1"`` is the derived diffusion bound
    ``sum|B|^2 <= (2 alpha + 1) lambda |x|_V^p + K1 |x|_H^2 + K3``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    T = getattr(pair, "T", 1.0) if T is None else T
    if x is None:
        x, y = sample_pairs(space, n_samples, rng)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float)) if y is not None else np.zeros_like(x)
    ts = rng.uniform(0.0, T, x.shape[0]) if t is None else np.broadcast_to(np.asarray(t, float), x.shape[:1]).copy()
    ts = np.where(ts == 0.0, T, ts)
    const = pair.constants
    margins = {c: [] for c in conditions}
    scales = {c: [] for c in conditions}

    with np.errstate(invalid="ignore", divide="ignore"):
        _fill_margins(pair, space, const, conditions, x, y, ts, k_fn, chunk, margins, scales)

    results = {}
    for c in conditions:
        mg = np.concatenate(margins[c])
        sc = np.concatenate(scales[c])
        # undefined margins (e.g. lambda <= 0 outside the hypotheses) count as violations
        bad = ~np.isfinite(mg) | (mg > tolerance * (1.0 + sc))
        k = int(np.argmax(np.where(np.isfinite(mg), mg, np.inf)))
        results[c] = ConditionResult(c, float(mg[k]), int(bad.sum()), mg.size,
                                     {"index": k, "t": float(ts[k]), "x": x[k].copy(), "y": y[k].copy()},
                                     note="weakened (K(t) supplied)" if (c == "C1" and k_fn is not None) else "")
    return ConditionReport(results, seed, tolerance)


def _fill_margins(pair, space, const, conditions, x, y, ts, k_fn, chunk, margins, scales):
    p, q = const.p, const.q
    for start in range(0, x.shape[0], chunk):
        xs, ys, tt = x[start:start + chunk], y[start:start + chunk], ts[start:start + chunk]
        ax, ay, bx, by = _eval_batch(pair, space, tt, xs, ys)
        lam = np.array([float(const.lambda_fn(s)) for s in tt])
        k1 = np.array([float(const.k1_fn(s)) for s in tt])
        k1b = np.array([float(const.k1bar_fn(s)) for s in tt])
        k2 = np.array([float(const.k2_fn(s)) for s in tt])
        dxy = xs - ys
        hx = np.einsum("pk,pk->p", xs, xs)
        vxp = _vpow(space, xs, p)
        bsq = _h_sq(space, bx)
        if "C1" in conditions:
            mono = 2.0 * np.einsum("pk,pk->p", dxy, ax - ay)
            noise = _h_sq(space, bx - by)
            kk = np.array([float(k_fn(s)) for s in tt]) * np.einsum("pk,pk->p", dxy, dxy) if k_fn is not None else 0.0
            margins["C1"].append(mono + noise - kk)
            scales["C1"].append(np.abs(mono) + noise + np.abs(kk))
        if "C2" in conditions:
            lhs_terms = 2.0 * np.einsum("pk,pk->p", xs, ax), bsq, lam * vxp
            rhs = k1 * hx + k1b
            margins["C2"].append(sum(lhs_terms) - rhs)
            scales["C2"].append(sum(np.abs(v) for v in lhs_terms) + np.abs(rhs))
        if "C4" in conditions:
            dn = dual_norm(space, ax, p)
            lhs = dn**q
            rhs = const.alpha * lam**q * vxp + lam ** (q - 1.0) * k2
            margins["C4"].append(lhs - rhs)
            scales["C4"].append(lhs + np.abs(rhs))
        if "R1" in conditions:
            rhs = (2 * const.alpha + 1) * lam * vxp + k1 * hx + np.array([float(const.k3(s)) for s in tt])
            margins["R1"].append(bsq - rhs)
            scales["R1"].append(bsq + np.abs(rhs))


def _vpow(space: DiscreteSpace, U: np.ndarray, p: float) -> np.ndarray:
    u = U @ space.values.T
    du = U @ space.derivs.T
    return (np.abs(u) ** p + np.abs(du) ** p) @ space.quadrature.weights


def _eval_batch(pair, space, ts, xs, ys):
    if getattr(pair, "autonomous", False):
        t0 = float(ts[0])
        return (pair.drift(space, t0, xs), pair.drift(space, t0, ys),
                pair.diffusion_profile(space, t0, xs), pair.diffusion_profile(space, t0, ys))
    ax = np.empty_like(xs)
    ay = np.empty_like(ys)
    bx = by = None
    for i, t in enumerate(ts):
        ax[i] = pair.drift(space, float(t), xs[i])
        ay[i] = pair.drift(space, float(t), ys[i])
        px = pair.diffusion_profile(space, float(t), xs[i])
        py = pair.diffusion_profile(space, float(t), ys[i])
        if bx is None:
            bx = np.empty((xs.shape[0],) + px.shape)
            by = np.empty_like(bx)
        bx[i], by[i] = px, py
    return ax, ay, bx, by
