"""Discrete adjoint via exact conditional expectations along each path.

For a path and a base index ``n`` the table ``U[n, r]`` (``r >= n``) holds
``E[u_r | F_{t_n}]``. Because the noise is additive and zero-mean, the
conditional state means are

    Ehat_n = x_n,    Ehat_{q+1} = A (Ehat_q + h N U[n, q]),

with ``A = (I - hM)^{-1}``, and the adjoint follows from a backward sweep

    G_N = -D Ehat_N,    G_{q-1} = A^T (G_q - h B Ehat_q),

giving ``p_n = G_n`` and ``E[p_r | F_{t_n}] = G_r`` for ``r > n``. Everything
is local to one path, so an ensemble is just a stack of independent paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import ResolventPowers
from .model import SlqProblem
from .paths import TimeGrid


@dataclass(eq=False)
class ConditionalControlTable:
    """``values[path, n, r]`` approximates ``E[u_r | F_{t_n}]`` for ``r >= n``.

    Entries with ``r < n`` are unused. ``iteration`` is the gradient index the
    table belongs to.
    """

    values: np.ndarray
    iteration: int = 0

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def diagonal(self) -> np.ndarray:
        """``values[:, n, n]`` stacked as ``(paths, N, m)``."""
        n = self.values.shape[1]
        return self.values[:, np.arange(n), np.arange(n)]


def init_table(
    problem: SlqProblem, grid: TimeGrid, constant_control, n_paths: int = 1
) -> ConditionalControlTable:
    c = np.broadcast_to(np.asarray(constant_control, dtype=float), (problem.dim_m,))
    if np.any(c < problem.bounds_lo) or np.any(c > problem.bounds_hi):
        raise ValueError(f"initial control {c} lies outside the admissible box")
    n = grid.n_steps
    values = np.empty((n_paths, n, n, problem.dim_m))
    values[...] = c
    return ConditionalControlTable(values, 0)


def conditional_sweep(
    problem: SlqProblem,
    resolvent: ResolventPowers,
    h: float,
    states: np.ndarray,
    table_values: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint ``p`` (paths, N+1, d) and ``Ntg[:, n, r] = N^T E[p_r | F_{t_n}]``.

    ``Ntg`` has shape (paths, N, N, m) and is filled for ``r >= n``; its diagonal
    is ``N^T p_n``.
    """
    n_paths, n1, d = states.shape
    n_steps = n1 - 1
    if table_values.shape[:3] != (n_paths, n_steps, n_steps):
        raise ValueError(
            f"table shape {table_values.shape} does not match states shape {states.shape}"
        )
    mat_N, mat_B, mat_D = problem.mat_N, problem.mat_B, problem.mat_D
    a_fwd = resolvent.base.T  # row-vector form of v -> A v
    a_adj = resolvent.base  # row-vector form of v -> A^T v

    # cond_mean[:, n, q] = E[x_q | F_{t_n}] for q >= n
    cond_mean = np.zeros((n_paths, n_steps + 1, n_steps + 1, d))
    idx = np.arange(n_steps + 1)
    cond_mean[:, idx, idx] = states
    drive = h * (table_values @ mat_N.T)
    for q in range(1, n_steps + 1):
        cond_mean[:, :q, q] = (cond_mean[:, :q, q - 1] + drive[:, :q, q - 1]) @ a_fwd

    ntg = np.zeros((n_paths, n_steps, n_steps, problem.dim_m))
    p = np.empty((n_paths, n_steps + 1, d))
    g = -(cond_mean[:, :, n_steps] @ mat_D.T)
    p[:, n_steps] = g[:, n_steps]
    for r in range(n_steps - 1, -1, -1):
        g = (g[:, : r + 1] - h * (cond_mean[:, : r + 1, r + 1] @ mat_B.T)) @ a_adj
        ntg[:, : r + 1, r] = g @ mat_N
        p[:, r] = g[:, r]
    return p, ntg


def _check_tag(table: ConditionalControlTable, iteration: int | None) -> None:
    if iteration is not None and iteration != table.iteration:
        raise ValueError(
            f"table belongs to iteration {table.iteration}, states to iteration {iteration}"
        )


def eval_adjoint(
    problem: SlqProblem,
    grid: TimeGrid,
    resolvent: ResolventPowers,
    table: ConditionalControlTable,
    states: np.ndarray,
    *,
    iteration: int | None = None,
) -> np.ndarray:
    """Discrete adjoint ``p[path, n]`` for ``n = 0..N``; ``p_N = -D x_N``."""
    _check_tag(table, iteration)
    p, _ = conditional_sweep(problem, resolvent, grid.step_h, states, table.values)
    return p


def next_table(
    problem: SlqProblem,
    kappa: float,
    table_values: np.ndarray,
    ntg: np.ndarray,
    new_control: np.ndarray | None = None,
) -> np.ndarray:
    """One projected-gradient step applied to every conditional control.

    ``new_control`` (paths, N, m), when given, is written onto the diagonal.
    """
    shrink = 1.0 - problem.alpha / kappa
    nxt = np.minimum(
        np.maximum(shrink * table_values + ntg / kappa, problem.bounds_lo), problem.bounds_hi
    )
    if new_control is not None:
        n = nxt.shape[1]
        nxt[:, np.arange(n), np.arange(n)] = new_control
    return nxt


def advance_table(
    problem: SlqProblem,
    grid: TimeGrid,
    resolvent: ResolventPowers,
    table: ConditionalControlTable,
    states: np.ndarray,
    kappa: float,
    *,
    iteration: int | None = None,
    new_control: np.ndarray | None = None,
) -> ConditionalControlTable:
    """Table for iteration ``l`` from the table and states of iteration ``l-1``.

    Without ``new_control`` the diagonal is produced by the same projected step,
    which is the control update itself up to rounding.
    """
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    _check_tag(table, iteration)
    _, ntg = conditional_sweep(problem, resolvent, grid.step_h, states, table.values)
    values = next_table(problem, kappa, table.values, ntg, new_control)
    return ConditionalControlTable(values, table.iteration + 1)
