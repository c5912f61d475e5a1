# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the quadrature assemblies that dominate solver time.

Signatures match :mod:`stochmono._kernels_py` exactly.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, pow

cnp.import_array()


def weighted_gram(const double[:, ::1] basis, const double[:, ::1] weights):
    """Return ``out[p] = basis.T @ diag(weights[p]) @ basis`` for every row p."""
    cdef Py_ssize_t P = weights.shape[0]
    cdef Py_ssize_t nq = basis.shape[0]
    cdef Py_ssize_t n = basis.shape[1]
    cdef Py_ssize_t p, q, k, l
    cdef double s, bk
    out_arr = np.zeros((P, n, n), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    with nogil:
        for p in range(P):
            for q in range(nq):
                s = weights[p, q]
                if s == 0.0:
                    continue
                for k in range(n):
                    bk = s * basis[q, k]
                    for l in range(k, n):
                        out[p, k, l] += bk * basis[q, l]
            for k in range(n):
                for l in range(k + 1, n):
                    out[p, l, k] = out[p, k, l]
    return out_arr


def power_flux(const double[:, ::1] z, const double[:, ::1] coef, double p):
    """Fused ``coef*|z|^(p-2)*z`` and its derivative ``(p-1)*coef*|z|^(p-2)``."""
    cdef Py_ssize_t P = z.shape[0]
    cdef Py_ssize_t nq = z.shape[1]
    cdef Py_ssize_t cp = coef.shape[0]
    cdef Py_ssize_t i, q, row
    cdef double a, zz, w
    flux_arr = np.empty((P, nq), dtype=np.float64)
    dflux_arr = np.empty((P, nq), dtype=np.float64)
    cdef double[:, ::1] flux = flux_arr
    cdef double[:, ::1] dflux = dflux_arr
    cdef bint quadratic = (p == 2.0)
    cdef bint cubic = (p == 3.0)
    cdef bint quartic = (p == 4.0)
    with nogil:
        for i in range(P):
            row = i if cp > 1 else 0
            for q in range(nq):
                a = coef[row, q]
                zz = z[i, q]
                if quadratic:
                    w = a
                elif cubic:
                    w = a * fabs(zz)
                elif quartic:
                    w = a * zz * zz
                elif zz == 0.0:
                    w = 0.0
                else:
                    w = a * pow(fabs(zz), p - 2.0)
                flux[i, q] = w * zz
                dflux[i, q] = (p - 1.0) * w
    return flux_arr, dflux_arr
