"""Projected gradient descent for constrained stochastic linear-quadratic control.

Implicit Euler in time, exact conditional expectations in the discrete adjoint
through a per-path recursion, Monte Carlo over a common Brownian ensemble.
"""

from .model import SlqProblem, NoiseSchedule, make_paper_example, make_laplacian_preset, validate
from .paths import TimeGrid, BrownianEnsemble, generate, coarsen, sample_piecewise
from .optimizer import SolverConfig, IterateRecord, SolveResult, solve, estimate_lipschitz

__all__ = [
    "BrownianEnsemble",
    "IterateRecord",
    "NoiseSchedule",
    "SlqProblem",
    "SolveResult",
    "SolverConfig",
    "TimeGrid",
    "coarsen",
    "estimate_lipschitz",
    "generate",
    "make_laplacian_preset",
    "make_paper_example",
    "sample_piecewise",
    "solve",
    "validate",
]

__version__ = "0.1.0"
