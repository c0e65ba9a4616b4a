"""Implicit Euler solves of the discrete state equation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import SlqProblem
from .paths import BrownianEnsemble, TimeGrid

COND_LIMIT = 1e12
RESIDUAL_TOL = 1e-10


class SingularResolventError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class ResolventPowers:
    """``base = (I - h M)^{-1}`` and ``powers[j] = base^j`` for ``j = 0..N``."""

    base: np.ndarray
    powers: np.ndarray

    @property
    def adjoint(self) -> np.ndarray:
        return self.base.T


def build_resolvent(problem: SlqProblem, grid: TimeGrid) -> ResolventPowers:
    d = problem.dim_d
    lhs = np.eye(d) - grid.step_h * problem.mat_M
    cond = np.linalg.cond(lhs)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularResolventError(f"I - hM is singular to working precision (cond ~ {cond:.3e})")
    base = np.linalg.solve(lhs, np.eye(d))
    resid = np.linalg.norm(lhs @ base - np.eye(d)) / np.sqrt(d)
    if resid > RESIDUAL_TOL:
        raise SingularResolventError(
            f"resolvent residual {resid:.3e} too large (cond ~ {cond:.3e})"
        )
    powers = np.empty((grid.n_steps + 1, d, d))
    powers[0] = np.eye(d)
    for j in range(grid.n_steps):
        powers[j + 1] = base @ powers[j]
    base.setflags(write=False)
    powers.setflags(write=False)
    return ResolventPowers(base, powers)


def _as_path_controls(problem: SlqProblem, grid: TimeGrid, control, n_paths: int | None):
    u = np.asarray(control, dtype=float)
    if u.ndim == 2:
        u = u[None]
    if u.ndim != 3 or u.shape[1:] != (grid.n_steps, problem.dim_m):
        raise ValueError(
            f"control must have shape (paths, {grid.n_steps}, {problem.dim_m}), got {np.shape(control)}"
        )
    if n_paths is not None and u.shape[0] not in (1, n_paths):
        raise ValueError(f"control has {u.shape[0]} paths, ensemble has {n_paths}")
    return u


def noise_terms(problem: SlqProblem, grid: TimeGrid, increments: np.ndarray) -> np.ndarray:
    """``sigma(t_n) dw_n`` per path and step, shape ``(paths, N, d)``."""
    if increments.shape[2] != problem.dim_k:
        raise ValueError(f"increments have k={increments.shape[2]}, problem has {problem.dim_k}")
    sig = problem.noise.on_grid(grid)
    return np.einsum("ndk,pnk->pnd", sig, increments)


def propagate(base: np.ndarray, x0, drive: np.ndarray) -> np.ndarray:
    """Run ``x_{n+1} = base (x_n + drive_n)`` for a stack of paths.

    ``drive`` has shape ``(paths, N, d)``; returns ``(paths, N+1, d)``.
    """
    n_paths, n_steps, d = drive.shape
    x = np.empty((n_paths, n_steps + 1, d))
    x[:, 0] = x0
    at = base.T
    for n in range(n_steps):
        x[:, n + 1] = (x[:, n] + drive[:, n]) @ at
    return x


def solve_state(
    problem: SlqProblem,
    grid: TimeGrid,
    ensemble: BrownianEnsemble,
    control,
    resolvent: ResolventPowers | None = None,
) -> np.ndarray:
    """State trajectories ``x[path, n]`` under ``control`` of shape ``(paths, N, m)``."""
    if ensemble.grid.n_steps != grid.n_steps:
        raise ValueError("ensemble grid does not match solve grid")
    res = resolvent or build_resolvent(problem, grid)
    u = _as_path_controls(problem, grid, control, ensemble.n_paths)
    drive = grid.step_h * (u @ problem.mat_N.T) + noise_terms(problem, grid, ensemble.increments)
    return propagate(res.base, problem.x0, drive)


def solve_homogeneous(
    problem: SlqProblem,
    grid: TimeGrid,
    control,
    resolvent: ResolventPowers | None = None,
) -> np.ndarray:
    """Control-to-state map ``y_h[u]``: zero initial state, no noise.

    Accepts one control ``(N, m)`` or a stack ``(paths, N, m)`` and returns the
    matching ``(N+1, d)`` or ``(paths, N+1, d)``.
    """
    res = resolvent or build_resolvent(problem, grid)
    u = _as_path_controls(problem, grid, control, None)
    drive = grid.step_h * (u @ problem.mat_N.T)
    y = propagate(res.base, np.zeros(problem.dim_d), drive)
    return y[0] if np.ndim(control) == 2 else y
