"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``STOCHMONO_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("STOCHMONO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

weighted_gram = _impl.weighted_gram


def power_flux(z, coef, p):
    # the compiled loop wins only where it avoids pow(); numpy's vectorized power is faster otherwise
    if _impl is _kernels_py or p not in (2.0, 3.0, 4.0):
        return _kernels_py.power_flux(z, coef, p)
    return _impl.power_flux(z, coef, p)


__all__ = ["BACKEND", "weighted_gram", "power_flux"]
