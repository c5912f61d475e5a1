"""Galerkin discretizations of stochastic evolution equations with monotone drift."""
__version__ = "0.1.0"

from . import analysis, noise, operators, schemes, solver, spaces  # noqa: E402,F401

__all__ = ["analysis", "noise", "operators", "schemes", "solver", "spaces", "__version__"]
