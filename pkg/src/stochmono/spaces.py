"""Nested finite-dimensional subspaces of W^{1,p}_0(0, 1) with H-orthonormal bases.

Two families are provided:

* ``spectral_sine``: ``e_k(x) = sqrt(2) sin(k pi x)``, ``k = 1..n``, global
  Gauss-Legendre quadrature.
* ``piecewise_linear_fe``: hat functions on the uniform mesh of width ``1/n``,
  orthonormalized in L^2 by a Cholesky factorization of the Gram matrix.  For
  dyadic ``n`` the hats are taken in hierarchical order (coarse levels first,
  left to right inside a level) so that the first ``dim(V_n)`` basis functions
  of ``V_{2n}`` *are* the basis of ``V_n``.

Coefficient vectors are always expressed in the H-orthonormal basis, so the
H-norm of an element is the Euclidean norm of its coefficients and the
H-orthogonal projection is the vector of pairings with the basis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from . import kernels

GRAM_TOL = 1e-10


class Family(str, Enum):
    SPECTRAL_SINE = "spectral_sine"
    PIECEWISE_LINEAR_FE = "piecewise_linear_fe"

    @classmethod
    def parse(cls, value: "Family | str") -> "Family":
        if isinstance(value, cls):
            return value
        aliases = {
            "spectral": cls.SPECTRAL_SINE,
            "sine": cls.SPECTRAL_SINE,
            "spectral_sine": cls.SPECTRAL_SINE,
            "fe": cls.PIECEWISE_LINEAR_FE,
            "p1": cls.PIECEWISE_LINEAR_FE,
            "piecewise_linear_fe": cls.PIECEWISE_LINEAR_FE,
        }
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown space family {value!r}") from None


@dataclass(frozen=True)
class QuadratureRule:
    """Composite Gauss-Legendre rule on (0, 1)."""

    nodes: np.ndarray
    weights: np.ndarray
    points_per_element: int
    elements: int

    @classmethod
    def composite(cls, elements: int, points: int) -> "QuadratureRule":
        xg, wg = leggauss(points)
        h = 1.0 / elements
        left = np.arange(elements) * h
        nodes = (left[:, None] + 0.5 * h * (xg[None, :] + 1.0)).ravel()
        weights = np.tile(0.5 * h * wg, elements)
        for arr in (nodes, weights):
            arr.setflags(write=False)
        return cls(nodes, weights, points, elements)

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Integrate samples taken at ``nodes`` along the last axis."""
        return values @ self.weights


@dataclass(frozen=True)
class BasisFunction:
    """One member ``e_k`` of the H-orthonormal basis."""

    kind: str
    index: int
    v_norm_sq: float
    _space: "DiscreteSpace" = field(repr=False, compare=False)

    def __call__(self, x) -> np.ndarray:
        c = np.zeros(self._space.dim)
        c[self.index] = 1.0
        return self._space.evaluate(c, x)

    def derivative(self, x) -> np.ndarray:
        c = np.zeros(self._space.dim)
        c[self.index] = 1.0
        return self._space.evaluate_derivative(c, x)


@dataclass(frozen=True, eq=False)
class DiscreteSpace:
    """Finite-dimensional Galerkin space ``V_n`` with its quadrature tables.

    ``values[q, k]`` and ``derivs[q, k]`` hold ``e_k`` and ``e_k'`` at the
    quadrature nodes.  Instances are immutable and may be shared between
    workers.
    """

    family: Family
    n: int
    p: float
    quadrature: QuadratureRule
    values: np.ndarray
    derivs: np.ndarray
    v_norm_sq: np.ndarray
    c_b: float
    hat_coeffs: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def q(self) -> float:
        return self.p / (self.p - 1.0)

    @property
    def basis(self) -> list[BasisFunction]:
        kind = "closed-form" if self.family is Family.SPECTRAL_SINE else "nodal-combination"
        return [BasisFunction(kind, k, float(self.v_norm_sq[k]), self) for k in range(self.dim)]

    @property
    def nodes(self) -> np.ndarray:
        """Interior mesh nodes (FE) or ``None`` for the spectral family."""
        if self.family is Family.PIECEWISE_LINEAR_FE:
            return np.arange(1, self.n) / self.n
        return None

    # -- evaluation ------------------------------------------------------
    def basis_values(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Basis values and derivatives at arbitrary points, shape ``(len(x), dim)``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.family is Family.SPECTRAL_SINE:
            k = np.arange(1, self.dim + 1) * np.pi
            arg = np.outer(x, k)
            return np.sqrt(2.0) * np.sin(arg), np.sqrt(2.0) * k * np.cos(arg)
        hv, hd = _hat_tables(self.n, x)
        return hv @ self.hat_coeffs.T, hd @ self.hat_coeffs.T

    def evaluate(self, coeffs, x) -> np.ndarray:
        return self.basis_values(x)[0] @ np.asarray(coeffs, dtype=float).T

    def evaluate_derivative(self, coeffs, x) -> np.ndarray:
        return self.basis_values(x)[1] @ np.asarray(coeffs, dtype=float).T

    # -- Gram-type matrices ------------------------------------------------
    @property
    def stiffness(self) -> np.ndarray:
        """``K[k, l] = (e_k', e_l')_H``."""
        return _cached(self, "_stiffness", lambda: (self.derivs * self.quadrature.weights[:, None]).T @ self.derivs)

    @property
    def v_gram(self) -> np.ndarray:
        """Gram matrix of the W^{1,2}_0 inner product ``(u,v)_H + (u',v')_H``."""
        def build():
            w = self.quadrature.weights[:, None]
            return (self.values * w).T @ self.values + self.stiffness
        return _cached(self, "_v_gram", build)

    def gram(self) -> np.ndarray:
        w = self.quadrature.weights[:, None]
        return (self.values * w).T @ self.values


def _cached(obj, name, build):
    try:
        return obj.__dict__[name]
    except KeyError:
        val = build()
        val.setflags(write=False)
        object.__setattr__(obj, name, val)
        return val


def _hat_tables(n: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fine nodal hats ``phi_j`` (j = 1..n-1) and their derivatives at ``x``."""
    h = 1.0 / n
    nodes = np.arange(1, n) * h
    d = (x[:, None] - nodes[None, :]) / h
    vals = np.clip(1.0 - np.abs(d), 0.0, None)
    # right-derivative convention at mesh nodes
    slope = np.where((d >= -1.0) & (d < 0.0), 1.0 / h, 0.0) - np.where((d >= 0.0) & (d < 1.0), 1.0 / h, 0.0)
    return vals, slope


def _is_dyadic(n: int) -> bool:
    return n >= 2 and (n & (n - 1)) == 0


def hierarchical_generators(n: int) -> np.ndarray:
    """Hierarchical hat generators written in the fine nodal basis.

    Row ``i`` holds the nodal values of the i-th generator.  Level ``l`` hats
    have half-width ``2**-l`` and sit on odd multiples of ``2**-l``.
    """
    levels = int(np.log2(n))
    fine = np.arange(1, n) / n
    rows = []
    for lev in range(1, levels + 1):
        width = 2.0 ** -lev
        for j in range(1, 2 ** lev, 2):
            center = j * width
            rows.append(np.clip(1.0 - np.abs(fine - center) / width, 0.0, None))
    return np.array(rows)


def default_quadrature_order(family: Family | str, n: int) -> int:
    family = Family.parse(family)
    if family is Family.SPECTRAL_SINE:
        return 8 * n + 16
    return 3


def build_space(family: Family | str, n: int, quadrature_order: int | None = None, p: float = 2.0) -> DiscreteSpace:
    """Construct ``V_n`` of the requested family.

    Parameters
    ----------
    family : {"spectral_sine", "piecewise_linear_fe"}
    n : int
        Space index.  ``dim = n`` for the spectral family and ``n - 1`` for
        finite elements of mesh width ``1/n``.
    quadrature_order : int, optional
        Total Gauss points for the spectral family (at least ``4 n``), points
        per element for finite elements (at least 2).
    p : float
        Exponent of the V-norm ``(|v|_p^p + |v'|_p^p)^(1/p)``.

    Raises
    ------
    ValueError
        If ``n`` is invalid or the quadrature is too coarse for the basis to
        be orthonormal (checked against a refined rule).
    """
    family = Family.parse(family)
    n = int(n)
    if n < 1 or (family is Family.PIECEWISE_LINEAR_FE and n < 2):
        raise ValueError(f"space index n={n} too small for {family.value}")
    if p < 2:
        raise ValueError("p must be >= 2")
    order = default_quadrature_order(family, n) if quadrature_order is None else int(quadrature_order)
    if order < 1:
        raise ValueError("quadrature_order must be positive")

    hat_coeffs = None
    if family is Family.SPECTRAL_SINE:
        rule = QuadratureRule.composite(1, order)
        k = np.arange(1, n + 1) * np.pi
        arg = np.outer(rule.nodes, k)
        values = np.sqrt(2.0) * np.sin(arg)
        derivs = np.sqrt(2.0) * k * np.cos(arg)
        check_rule = QuadratureRule.composite(1, 2 * order + 8)
    else:
        rule = QuadratureRule.composite(n, order)
        hv, hd = _hat_tables(n, rule.nodes)
        gens = hierarchical_generators(n) if _is_dyadic(n) else np.eye(n - 1)
        gq = hv @ gens.T
        gram = (gq * rule.weights[:, None]).T @ gq
        try:
            chol = np.linalg.cholesky(gram)
        except np.linalg.LinAlgError:
            raise ValueError(f"quadrature order {order} too coarse: Gram matrix not positive definite") from None
        hat_coeffs = solve_triangular(chol, gens, lower=True)
        values = hv @ hat_coeffs.T
        derivs = hd @ hat_coeffs.T
        check_rule = QuadratureRule.composite(n, max(order, 2) + 2)

    # orthonormality against an independent, finer rule
    if family is Family.SPECTRAL_SINE:
        cv = np.sqrt(2.0) * np.sin(np.outer(check_rule.nodes, np.arange(1, n + 1) * np.pi))
    else:
        cv = _hat_tables(n, check_rule.nodes)[0] @ hat_coeffs.T
    g_check = (cv * check_rule.weights[:, None]).T @ cv
    g_self = (values * rule.weights[:, None]).T @ values
    err = max(np.abs(g_check - np.eye(cv.shape[1])).max(), np.abs(g_self - np.eye(cv.shape[1])).max())
    if err > GRAM_TOL:
        raise ValueError(f"quadrature order {order} too coarse: Gram deviates from identity by {err:.2e}")

    v_norm_sq = _v_norm_pow(values.T, derivs.T, rule.weights, p) ** (2.0 / p)
    for arr in (values, derivs, v_norm_sq):
        arr.setflags(write=False)
    if hat_coeffs is not None:
        hat_coeffs.setflags(write=False)
    return DiscreteSpace(family, n, float(p), rule, values, derivs, v_norm_sq, float(v_norm_sq.sum()), hat_coeffs)


def _v_norm_pow(u: np.ndarray, du: np.ndarray, weights: np.ndarray, p: float) -> np.ndarray:
    """``|v|_V^p`` for samples stacked along the last axis."""
    return (np.abs(u) ** p + np.abs(du) ** p) @ weights


def project(space: DiscreteSpace, f, source: DiscreteSpace | None = None) -> np.ndarray:
    """H-orthogonal projection onto ``space``.

    ``f`` is either a callable profile ``x -> f(x)`` or a coefficient array
    (``(..., source.dim)``) in ``source``.  For coefficient input the pairings
    are evaluated on the quadrature of the finer of the two spaces.
    """
    if callable(f):
        fx = np.asarray(f(space.quadrature.nodes), dtype=float)
        return (fx * space.quadrature.weights) @ space.values
    if source is None:
        raise ValueError("coefficient input requires the source space")
    coeffs = np.asarray(f, dtype=float)
    if coeffs.shape[-1] != source.dim:
        raise ValueError(f"expected {source.dim} coefficients, got {coeffs.shape[-1]}")
    return coeffs @ cross_gram(source, space)


def cross_gram(a: DiscreteSpace, b: DiscreteSpace) -> np.ndarray:
    """``G[i, j] = (a.e_i, b.e_j)_H`` on the quadrature of the richer space."""
    if a is b:
        return np.eye(a.dim)
    rule = a.quadrature if a.quadrature.nodes.size >= b.quadrature.nodes.size else b.quadrature
    va = a.values if rule is a.quadrature else a.basis_values(rule.nodes)[0]
    vb = b.values if rule is b.quadrature else b.basis_values(rule.nodes)[0]
    return (va * rule.weights[:, None]).T @ vb


def embed(coeffs, source: DiscreteSpace, target: DiscreteSpace) -> np.ndarray:
    """Express elements of ``source`` in ``target`` (exact when nested)."""
    coeffs = np.asarray(coeffs, dtype=float)
    if source.family is target.family and _nested(source, target):
        out = np.zeros(coeffs.shape[:-1] + (target.dim,))
        out[..., : source.dim] = coeffs
        return out
    return project(target, coeffs, source)


def _nested(a: DiscreteSpace, b: DiscreteSpace) -> bool:
    if a.n == b.n:
        return True
    if a.family is Family.SPECTRAL_SINE:
        return a.n <= b.n
    return _is_dyadic(a.n) and _is_dyadic(b.n) and a.n <= b.n


def v_norm(space: DiscreteSpace, v, p: float | None = None) -> np.ndarray:
    """W^{1,p}_0 norm of coefficient vector(s) ``v`` (last axis)."""
    p = space.p if p is None else p
    v = np.asarray(v, dtype=float)
    u = v @ space.values.T
    du = v @ space.derivs.T
    return _v_norm_pow(u, du, space.quadrature.weights, p) ** (1.0 / p)


def dual_norm(space: DiscreteSpace, g, p: float | None = None, tol: float = 1e-9, max_iter: int = 60) -> np.ndarray:
    """Norm of the functional ``z -> g . z`` in the dual of ``(V_n, |.|_V)``.

    For ``p = 2`` this is ``sqrt(g^T G_V^{-1} g)``.  Otherwise the convex
    problem ``min_z |z|_V^p / p - g.z`` is solved by damped Newton; at the
    minimiser ``|g|_* = g.z / |z|_V``, and at any iterate that ratio is a lower
    bound.
    """
    p = space.p if p is None else p
    g = np.asarray(g, dtype=float)
    squeeze = g.ndim == 1
    g = np.atleast_2d(g)
    factor = cho_factor(space.v_gram)
    z2 = cho_solve(factor, g.T).T
    if p == 2.0:
        out = np.sqrt(np.maximum(np.einsum("pk,pk->p", g, z2), 0.0))
        return out[0] if squeeze else out

    out = np.zeros(g.shape[0])
    active = np.linalg.norm(g, axis=1) > 0
    if not active.any():
        return out[0] if squeeze else out
    ga, z = g[active], z2[active]
    w = space.quadrature.weights
    stacked = np.ascontiguousarray(np.vstack([space.values, space.derivs]))
    ww = np.concatenate([w, w])

    def parts(z, gv):
        s = z @ stacked.T
        a = np.abs(s)
        npow = (a**p) @ ww
        grad = (a ** (p - 2.0) * s * ww) @ stacked - gv
        return s, npow, grad

    # optimal scaling along the p = 2 direction
    _, nd, _ = parts(z, ga)
    gd = np.einsum("pk,pk->p", ga, z)
    z = z * (gd / nd)[:, None] ** (1.0 / (p - 1.0))
    todo = np.arange(z.shape[0])
    scale = np.linalg.norm(ga, axis=1)
    for _ in range(max_iter):
        zt, gt = z[todo], ga[todo]
        s, npow, grad = parts(zt, gt)
        gnorm = np.linalg.norm(grad, axis=1)
        keep = gnorm > tol * scale[todo]
        if not keep.any():
            break
        todo, zt, gt, s, npow, grad = todo[keep], zt[keep], gt[keep], s[keep], npow[keep], grad[keep]
        phi = npow / p - np.einsum("pk,pk->p", gt, zt)
        hess = kernels.weighted_gram(stacked, np.ascontiguousarray((p - 1.0) * np.abs(s) ** (p - 2.0) * ww))
        hess += 1e-14 * np.trace(hess, axis1=1, axis2=2)[:, None, None] * np.eye(z.shape[1])
        step = np.linalg.solve(hess, -grad[..., None])[..., 0]
        t = np.ones(zt.shape[0])
        slope = np.einsum("pk,pk->p", grad, step)
        for _ in range(30):
            trial = zt + t[:, None] * step
            _, n_t, _ = parts(trial, gt)
            phi_t = n_t / p - np.einsum("pk,pk->p", gt, trial)
            bad = phi_t > phi + 1e-4 * t * slope
            if not bad.any():
                break
            t = np.where(bad, 0.5 * t, t)
        z[todo] = zt + t[:, None] * step
    out[active] = np.einsum("pk,pk->p", ga, z) / v_norm(space, z, p)
    return out[0] if squeeze else out


def norms(space: DiscreteSpace, v, p: float | None = None) -> tuple[float, float, float]:
    """Return ``(|v|_H, |v|_V, |v|_{V_n^*})`` for one coefficient vector."""
    v = np.asarray(v, dtype=float)
    if v.shape != (space.dim,):
        raise ValueError(f"expected a vector of length {space.dim}, got shape {v.shape}")
    if not np.any(v):
        return 0.0, 0.0, 0.0
    p = space.p if p is None else p
    return float(np.linalg.norm(v)), float(v_norm(space, v, p)), float(dual_norm(space, v, p))


def c_b_ratio(space: DiscreteSpace, m: int, alpha: float, T: float = 1.0) -> float:
    """Stability index ``rho(n, m) = alpha * C_B(n) * T / m``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    return alpha * space.c_b * T / m


def spectral_c_b(n: int) -> float:
    """Closed form ``sum_{k<=n} (1 + k^2 pi^2)`` of the p = 2 sine basis."""
    k = np.arange(1, n + 1)
    return float(np.sum(1.0 + (k * np.pi) ** 2))


PROFILES: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sine1": lambda x: np.sqrt(2.0) * np.sin(np.pi * x),
    "bump": lambda x: np.where((x > 0.1) & (x < 0.6), np.exp(-1.0 / np.maximum(1.0 - ((x - 0.35) / 0.25) ** 2, 1e-300)) * np.e, 0.0),
    "zero": lambda x: np.zeros_like(x),
    "parabola": lambda x: 4.0 * x * (1.0 - x),
}


def initial_coefficients(space: DiscreteSpace, profile: str | Sequence[float] | Callable) -> np.ndarray:
    """Projected initial datum from a preset name, a callable, or coefficients.

    A sequence is read as coefficients in the space's own basis (padded with
    zeros or truncated to ``dim``).
    """
    if isinstance(profile, str):
        if profile == "ones":
            return np.ones(space.dim)
        try:
            fn = PROFILES[profile]
        except KeyError:
            raise ValueError(f"unknown initial profile {profile!r}") from None
        return project(space, fn)
    if callable(profile):
        return project(space, profile)
    c = np.asarray(profile, dtype=float)
    out = np.zeros(space.dim)
    out[: min(c.size, space.dim)] = c[: space.dim]
    return out
