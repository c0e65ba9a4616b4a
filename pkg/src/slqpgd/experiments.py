"""Reference-solution error study, rate fits and CSV reports."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import SlqProblem
from .optimizer import IterateRecord, SolverConfig, SolveResult, solve
from .paths import TimeGrid, coarsen, generate, sample_piecewise

log = logging.getLogger(__name__)

DEFAULT_LADDER = (5, 10, 20, 50)
DEFAULT_REFERENCE_STEPS = 100
METRIC_NAMES = ("e_terminal", "e_state_l2", "e_control_l2")


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class ErrorMetrics:
    h: float
    n_paths: int
    e_terminal: float
    e_state_l2: float
    e_control_l2: float


@dataclass(frozen=True)
class RateFit:
    h: tuple[float, ...]
    errors: tuple[float, ...]
    slope: float
    intercept: float
    notes: tuple[str, ...] = field(default=())


def fmt(x: float) -> str:
    return f"{x:.17g}"


def run_reference(problem: SlqProblem, fine_config: SolverConfig, **kwargs) -> SolveResult:
    """Full solve on the fine grid; its ensemble drives every coarse solve."""
    return solve(problem, fine_config, **kwargs)


def solve_coupled(problem: SlqProblem, reference: SolveResult, n_steps: int, **kwargs) -> SolveResult:
    """Solve on a coarser grid driven by the reference's Brownian paths."""
    grid = TimeGrid(problem.horizon_T, n_steps)
    ens = coarsen(reference.ensemble, grid)
    config = dataclasses.replace(reference.config, n_steps=n_steps)
    return solve(problem, config, ens, **kwargs)


def compute_errors(reference: SolveResult, coarse: SolveResult) -> ErrorMetrics:
    """Mean over paths of terminal, state-L2 and control-L2 distances to the reference.

    The reference is restricted to the coarse nodes by left-endpoint sampling.
    """
    fine_grid, grid = reference.grid, coarse.grid
    grid.refinement(fine_grid)
    if reference.ensemble.seed != coarse.ensemble.seed or reference.ensemble.n_paths != coarse.ensemble.n_paths:
        raise ValueError("coarse solve is not driven by the reference ensemble")
    if not np.array_equal(coarsen(reference.ensemble, grid).increments, coarse.ensemble.increments):
        raise ValueError("coarse increments are not the aggregated reference increments")
    h = grid.step_h
    x_ref = sample_piecewise(reference.states, fine_grid, grid, axis=1)
    u_ref = sample_piecewise(reference.controls, fine_grid, grid, axis=1)
    dx = coarse.states - x_ref
    du = coarse.controls - u_ref
    e_terminal = np.linalg.norm(dx[:, -1], axis=-1)
    e_state = np.sqrt(h * np.einsum("pni,pni->p", dx[:, 1:], dx[:, 1:]))
    e_control = np.sqrt(h * np.einsum("pni,pni->p", du, du))
    return ErrorMetrics(
        h,
        coarse.ensemble.n_paths,
        float(np.mean(e_terminal)),
        float(np.mean(e_state)),
        float(np.mean(e_control)),
    )


def fit_rate(h: Sequence[float], errors: Sequence[float]) -> RateFit:
    """Least-squares slope of ``log(error)`` against ``log(h)``; zero errors are dropped."""
    h = np.asarray(h, dtype=float)
    err = np.asarray(errors, dtype=float)
    keep = err > 0
    notes = tuple(f"excluded h={fmt(v)} (zero error)" for v in h[~keep])
    if np.unique(h[keep]).size < 3:
        raise InsufficientDataError("need at least three distinct h with nonzero error")
    slope, intercept = np.polyfit(np.log(h[keep]), np.log(err[keep]), 1)
    return RateFit(tuple(h), tuple(err), float(slope), float(intercept), notes)


def fit_rates(metrics: Sequence[ErrorMetrics]) -> dict[str, RateFit]:
    hs = [m.h for m in metrics]
    return {name: fit_rate(hs, [getattr(m, name) for m in metrics]) for name in METRIC_NAMES}


@dataclass
class ConvergenceStudy:
    reference: SolveResult
    metrics: list[ErrorMetrics]
    rates: dict[str, RateFit]


def convergence_study(
    problem: SlqProblem,
    config: SolverConfig,
    ladder: Sequence[int] = DEFAULT_LADDER,
    reference_steps: int = DEFAULT_REFERENCE_STEPS,
    **kwargs,
) -> ConvergenceStudy:
    """Errors of coupled coarse solves against one fine reference, plus slopes."""
    for n in ladder:
        TimeGrid(problem.horizon_T, n).refinement(TimeGrid(problem.horizon_T, reference_steps))
    ref_config = dataclasses.replace(config, n_steps=reference_steps)
    reference = run_reference(problem, ref_config, **kwargs)
    metrics = []
    for n in ladder:
        coarse = solve_coupled(problem, reference, n, **kwargs)
        metrics.append(compute_errors(reference, coarse))
        log.info("N=%d errors %s", n, metrics[-1])
    return ConvergenceStudy(reference, metrics, fit_rates(metrics))


def snapshot_trajectories(result: SolveResult, path_index: int):
    """``(t, u, x)`` for one path: nodes ``(N+1,)``, controls ``(N, m)``, states ``(N+1, d)``."""
    if not 0 <= path_index < result.controls.shape[0]:
        raise IndexError(f"path index {path_index} out of range")
    return result.grid.nodes, result.controls[path_index], result.states[path_index]


def count_inversions(values: Sequence[float]) -> int:
    """Adjacent pairs along a decreasing-h ladder where the error goes up."""
    return int(sum(b > a for a, b in zip(values, values[1:])))


# --- CSV output -------------------------------------------------------------


def _write(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def write_cost_decay(path, records: Sequence[IterateRecord]) -> Path:
    return _write(path, ("iter", "cost"), ((r.iteration, fmt(r.cost)) for r in records))


def write_iterates(path, records: Sequence[IterateRecord]) -> Path:
    return _write(
        path,
        ("iter", "cost", "control_change", "optimality_residual"),
        (
            (r.iteration, fmt(r.cost), fmt(r.control_change), fmt(r.optimality_residual))
            for r in records
        ),
    )


def write_errors(path, metrics: Sequence[ErrorMetrics]) -> Path:
    return _write(
        path,
        ("h",) + METRIC_NAMES,
        ((fmt(m.h), fmt(m.e_terminal), fmt(m.e_state_l2), fmt(m.e_control_l2)) for m in metrics),
    )


def write_rates(path, rates: dict[str, RateFit]) -> Path:
    return _write(
        path,
        ("metric", "slope", "intercept"),
        ((name, fmt(r.slope), fmt(r.intercept)) for name, r in rates.items()),
    )


def write_trajectory(path, result: SolveResult, path_index: int) -> Path:
    """Columns ``t, u_1..u_m, x_1..x_d``; the control cell at ``t = T`` is empty."""
    t, u, x = snapshot_trajectories(result, path_index)
    m, d = u.shape[1], x.shape[1]
    header = ["t"] + [f"u_{i + 1}" for i in range(m)] + [f"x_{i + 1}" for i in range(d)]
    rows = []
    for n, tn in enumerate(t):
        uc = [fmt(v) for v in u[n]] if n < len(u) else [""] * m
        rows.append([fmt(tn)] + uc + [fmt(v) for v in x[n]])
    return _write(path, header, rows)


def read_csv_column(path, column: str) -> list[float]:
    with Path(path).open() as fh:
        return [float(row[column]) if row[column] else math.nan for row in csv.DictReader(fh)]


__all__ = [
    "ConvergenceStudy",
    "ErrorMetrics",
    "InsufficientDataError",
    "RateFit",
    "compute_errors",
    "convergence_study",
    "count_inversions",
    "fit_rate",
    "fit_rates",
    "run_reference",
    "snapshot_trajectories",
    "solve_coupled",
    "write_cost_decay",
    "write_errors",
    "write_iterates",
    "write_rates",
    "write_trajectory",
]
