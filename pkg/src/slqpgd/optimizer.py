"""Projected gradient descent on the discrete SLQ problem."""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import adjoint
from .forward import ResolventPowers, build_resolvent, noise_terms, propagate
from .model import SlqProblem
from .paths import BrownianEnsemble, TimeGrid, generate

log = logging.getLogger(__name__)

# floats held per chunk of paths; keeps the O(N^2) per-path buffers bounded
CHUNK_BUDGET = 4_000_000


class StepSizeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SolverConfig:
    n_steps: int = 20
    n_iters: int = 10
    kappa: float = 0.45
    n_paths: int = 1000
    seed: int = 1
    initial_control: tuple[float, ...] | None = None
    stop_tol: float = 0.0

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if self.n_iters < 1:
            raise ValueError("n_iters must be at least 1")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        if self.stop_tol < 0:
            raise ValueError("stop_tol must be non-negative")
        if self.initial_control is not None:
            object.__setattr__(
                self, "initial_control", tuple(float(v) for v in np.ravel(self.initial_control))
            )

    def start_control(self, problem: SlqProblem) -> np.ndarray:
        if self.initial_control is None:
            c = np.zeros(problem.dim_m)
        else:
            c = np.broadcast_to(np.array(self.initial_control), (problem.dim_m,)).copy()
        if np.any(c < problem.bounds_lo) or np.any(c > problem.bounds_hi):
            raise ValueError(f"initial control {c} lies outside the admissible box")
        return c


@dataclass(frozen=True)
class IterateRecord:
    iteration: int
    cost: float
    control_change: float
    optimality_residual: float


@dataclass(eq=False)
class SolveResult:
    problem: SlqProblem
    config: SolverConfig
    grid: TimeGrid
    ensemble: BrownianEnsemble
    controls: np.ndarray
    states: np.ndarray
    records: list[IterateRecord]
    lipschitz_estimate: float
    warnings: list[str] = field(default_factory=list)
    control_history: np.ndarray | None = None

    @property
    def costs(self) -> np.ndarray:
        return np.array([r.cost for r in self.records])


def project_box(u, lo, hi) -> np.ndarray:
    """Componentwise ``min(max(lo, u), hi)``."""
    return np.minimum(np.maximum(u, lo), hi)


def update_control(u, p, alpha: float, kappa: float, mat_N, lo, hi) -> np.ndarray:
    """``P_ad[u - (alpha u - N^T p) / kappa]`` applied pathwise and stepwise.

    ``p`` may carry the terminal node (``N + 1`` entries); it is ignored.
    """
    u = np.asarray(u, dtype=float)
    p = np.asarray(p, dtype=float)
    mat_N = np.asarray(mat_N, dtype=float)
    n_steps = u.shape[-2]
    if p.shape[-2] == n_steps + 1:
        p = p[..., :n_steps, :]
    if p.shape[-2] != n_steps or p.shape[-1] != mat_N.shape[0] or u.shape[-1] != mat_N.shape[1]:
        raise ValueError(f"incompatible shapes u{u.shape}, p{p.shape}, N{mat_N.shape}")
    return project_box(u - (alpha * u - p @ mat_N) / kappa, lo, hi)


def path_costs(problem: SlqProblem, h: float, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
    """Per-path value of the bracket in the cost (without the 1/2 factor)."""
    x = states[:, 1:]
    running = h * np.einsum("pni,ij,pnj->p", x, problem.mat_B, x)
    effort = h * problem.alpha * np.einsum("pni,pni->p", controls, controls)
    xt = states[:, -1]
    terminal = np.einsum("pi,ij,pj->p", xt, problem.mat_D, xt)
    return running + effort + terminal


def cost(problem: SlqProblem, grid: TimeGrid, states, controls) -> float:
    """Monte Carlo cost ``J_h``: state on nodes 1..N, control on left endpoints."""
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    if states.ndim == 2:
        states = states[None]
    if controls.ndim == 2:
        controls = controls[None]
    if states.shape[1] != grid.n_steps + 1 or controls.shape[1] != grid.n_steps:
        raise ValueError("states need N+1 nodes and controls N values per path")
    if states.shape[0] != controls.shape[0]:
        raise ValueError(f"{states.shape[0]} state paths vs {controls.shape[0]} control paths")
    return 0.5 * float(np.mean(path_costs(problem, grid.step_h, states, controls)))


def _u_norm_sq(h: float, v: np.ndarray) -> np.ndarray:
    return h * np.einsum("pni,pni->p", v, v)


def homogeneous_adjoint(problem: SlqProblem, resolvent: ResolventPowers, h: float, y: np.ndarray):
    """Adjoint of a deterministic trajectory ``y`` (N+1, d)."""
    n_steps = y.shape[0] - 1
    q = np.empty_like(y)
    q[n_steps] = -problem.mat_D @ y[n_steps]
    at = resolvent.base.T
    for n in range(n_steps - 1, -1, -1):
        q[n] = at @ (q[n + 1] - h * problem.mat_B @ y[n + 1])
    return q


def hessian_apply(problem: SlqProblem, grid: TimeGrid, resolvent: ResolventPowers, v: np.ndarray):
    """Reduced Hessian ``v -> alpha v - N^T q_h[y_h[v]]`` on deterministic controls."""
    h = grid.step_h
    y = propagate(resolvent.base, np.zeros(problem.dim_d), (h * (v @ problem.mat_N.T))[None])[0]
    q = homogeneous_adjoint(problem, resolvent, h, y)
    return problem.alpha * v - q[:-1] @ problem.mat_N


def estimate_lipschitz(
    problem: SlqProblem,
    grid: TimeGrid,
    resolvent: ResolventPowers | None = None,
    max_iter: int = 50,
    rtol: float = 1e-8,
) -> float:
    """Largest eigenvalue of the reduced Hessian by power iteration."""
    res = resolvent or build_resolvent(problem, grid)
    v = np.random.default_rng(0).standard_normal((grid.n_steps, problem.dim_m))
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = hessian_apply(problem, grid, res, v)
        new = float(np.vdot(v, w))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(new - lam) <= rtol * abs(new):
            lam = new
            break
        lam = new
    return lam


def lipschitz_bound(problem: SlqProblem, grid: TimeGrid, resolvent: ResolventPowers | None = None) -> float:
    """Closed-form upper bound ``alpha + |N|^2 a^2 (|B| T (T+h)/2 + |D| T)``.

    ``a`` is the largest spectral norm among the resolvent powers.
    """
    res = resolvent or build_resolvent(problem, grid)
    T, h = grid.horizon_T, grid.step_h
    a = max(np.linalg.norm(pw, 2) for pw in res.powers)
    n2 = np.linalg.norm(problem.mat_N, 2) ** 2
    b = np.linalg.norm(problem.mat_B, 2)
    dn = np.linalg.norm(problem.mat_D, 2)
    return problem.alpha + n2 * a * a * (b * T * (T + h) / 2.0 + dn * T)


def iterate_paths(
    problem: SlqProblem,
    grid: TimeGrid,
    resolvent: ResolventPowers,
    increments: np.ndarray,
    kappa: float,
    n_iters: int,
    initial_control: np.ndarray,
):
    """Run the implementable scheme on a stack of paths.

    Yields ``(l, u, x, table, p)`` for ``l = 0..n_iters``; the arrays belong to
    the generator and are replaced, not mutated, between yields.
    """
    h = grid.step_h
    n_paths = increments.shape[0]
    noise = noise_terms(problem, grid, increments)
    u = np.empty((n_paths, grid.n_steps, problem.dim_m))
    u[...] = initial_control
    table = adjoint.init_table(problem, grid, initial_control, n_paths).values
    for ell in range(n_iters + 1):
        x = propagate(resolvent.base, problem.x0, h * (u @ problem.mat_N.T) + noise)
        p, ntg = adjoint.conditional_sweep(problem, resolvent, h, x, table)
        yield ell, u, x, table, p
        if ell == n_iters:
            return
        u_next = update_control(
            u, p, problem.alpha, kappa, problem.mat_N, problem.bounds_lo, problem.bounds_hi
        )
        table = adjoint.next_table(problem, kappa, table, ntg, u_next)
        u = u_next


@dataclass
class _ChunkOut:
    path_cost: np.ndarray
    change: np.ndarray
    residual: np.ndarray
    controls: np.ndarray
    states: np.ndarray
    history: np.ndarray | None


def _run_chunk(problem, grid, resolvent, increments, kappa, n_iters, c0, keep_history):
    h = grid.step_h
    n_paths = increments.shape[0]
    out = _ChunkOut(
        np.empty((n_iters + 1, n_paths)),
        np.full((n_iters + 1, n_paths), np.nan),
        np.empty((n_iters + 1, n_paths)),
        None,
        None,
        np.empty((n_iters + 1, n_paths, grid.n_steps, problem.dim_m)) if keep_history else None,
    )
    u_prev = None
    for ell, u, x, _, p in iterate_paths(problem, grid, resolvent, increments, kappa, n_iters, c0):
        out.path_cost[ell] = path_costs(problem, h, x, u)
        if u_prev is not None:
            out.change[ell] = _u_norm_sq(h, u - u_prev)
        target = project_box(p[:, :-1] @ problem.mat_N / problem.alpha, problem.bounds_lo, problem.bounds_hi)
        out.residual[ell] = _u_norm_sq(h, u - target)
        if keep_history:
            out.history[ell] = u
        u_prev = u
    out.controls, out.states = u, x
    return out


def chunk_size(problem: SlqProblem, n_steps: int) -> int:
    per_path = (n_steps + 1) ** 2 * problem.dim_d + 3 * n_steps**2 * problem.dim_m
    return max(1, CHUNK_BUDGET // per_path)


def _solve_once(problem, config, grid, res, ensemble, n_iters, keep_history, workers):
    c0 = config.start_control(problem)
    size = chunk_size(problem, grid.n_steps)
    bounds = [(s, min(s + size, ensemble.n_paths)) for s in range(0, ensemble.n_paths, size)]

    def job(b):
        inc = ensemble.increments[b[0] : b[1]]
        return _run_chunk(problem, grid, res, inc, config.kappa, n_iters, c0, keep_history)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(job, bounds))
    else:
        outs = [job(b) for b in bounds]

    path_cost = np.concatenate([o.path_cost for o in outs], axis=1)
    change = np.concatenate([o.change for o in outs], axis=1)
    residual = np.concatenate([o.residual for o in outs], axis=1)
    records = [
        IterateRecord(
            ell,
            0.5 * float(np.mean(path_cost[ell])),
            math.sqrt(float(np.mean(change[ell]))) if ell else math.nan,
            math.sqrt(float(np.mean(residual[ell]))),
        )
        for ell in range(n_iters + 1)
    ]
    controls = np.concatenate([o.controls for o in outs])
    states = np.concatenate([o.states for o in outs])
    history = np.concatenate([o.history for o in outs], axis=1) if keep_history else None
    return records, controls, states, history


def solve(
    problem: SlqProblem,
    config: SolverConfig,
    ensemble: BrownianEnsemble | None = None,
    *,
    keep_history: bool = False,
    workers: int = 1,
) -> SolveResult:
    """Run ``config.n_iters`` projected gradient steps on a common path ensemble.

    Records are produced for ``l = 0..L`` (the last one evaluates the final
    control). Paths are processed in fixed-size chunks, optionally on several
    threads; the chunking does not depend on ``workers`` so results are
    identical for any thread count.
    """
    grid = TimeGrid(problem.horizon_T, config.n_steps)
    if ensemble is None:
        ensemble = generate(config.seed, config.n_paths, grid, problem.dim_k)
    elif ensemble.grid.n_steps != grid.n_steps or not np.isclose(
        ensemble.grid.horizon_T, grid.horizon_T
    ):
        raise ValueError("ensemble grid does not match the solver grid")
    res = build_resolvent(problem, grid)
    k_est = estimate_lipschitz(problem, grid, res)
    notes = []
    if config.kappa < k_est:
        msg = f"kappa={config.kappa:g} is below the Lipschitz estimate {k_est:.6g}"
        notes.append(msg)
        warnings.warn(msg, StepSizeWarning, stacklevel=2)

    n_iters = config.n_iters
    records, controls, states, history = _solve_once(
        problem, config, grid, res, ensemble, n_iters, keep_history, workers
    )
    if config.stop_tol > 0:
        stop = next(
            (r.iteration for r in records[1:] if r.control_change < config.stop_tol), None
        )
        if stop is not None and stop < n_iters:
            log.info("control change below %g at iteration %d", config.stop_tol, stop)
            records, controls, states, history = _solve_once(
                problem, config, grid, res, ensemble, stop, keep_history, workers
            )
    return SolveResult(
        problem, config, grid, ensemble, controls, states, records, k_est, notes, history
    )
