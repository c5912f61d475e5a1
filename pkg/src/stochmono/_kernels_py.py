"""Pure-numpy reference implementations of the compiled kernels."""
import numpy as np


def weighted_gram(basis, weights):
    """Return ``out[p] = basis.T @ diag(weights[p]) @ basis`` for every row p."""
    basis = np.ascontiguousarray(basis, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    return np.einsum("qk,pq,ql->pkl", basis, weights, basis, optimize=True)


def power_flux(z, coef, p):
    """Fused ``coef*|z|^(p-2)*z`` and its derivative ``(p-1)*coef*|z|^(p-2)``."""
    z = np.asarray(z, dtype=np.float64)
    coef = np.asarray(coef, dtype=np.float64)
    if p == 2.0:
        w = np.broadcast_to(coef, z.shape).copy()
    else:
        w = coef * np.abs(z) ** (p - 2.0)
    return w * z, (p - 1.0) * w
