"""Anchored regression for systems of convex nonlinear equations.

Estimates a solution of y_m = f_m(x) + noise by maximizing an anchored linear
functional over the one-sided-risk feasible set, builds the anchor from data
(spiked gradient / spiked curvature recipes), certifies recovery through the
KKT cone condition, and evaluates the statistical quantities that drive the
sample-complexity guarantees.
"""

from . import analysis, anchor, core, harness, models, solver
from .core import ProblemInstance, RngStream, one_sided_risk, one_sided_risk_subgradient
from .models import ModelKind, NoiseSpec, sample_instance
from .solver import Regularizer, SolverConfig, certify, solve

__version__ = "0.1.0"

__all__ = [
    "analysis",
    "anchor",
    "core",
    "harness",
    "models",
    "solver",
    "ProblemInstance",
    "RngStream",
    "ModelKind",
    "NoiseSpec",
    "Regularizer",
    "SolverConfig",
    "one_sided_risk",
    "one_sided_risk_subgradient",
    "sample_instance",
    "solve",
    "certify",
    "__version__",
]
