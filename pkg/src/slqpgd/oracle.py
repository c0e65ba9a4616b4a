"""Exact reference solutions on a binomial-tree noise model.

Each increment is drawn uniformly from the ``2**k`` sign patterns
``{+sqrt(h), -sqrt(h)}^k``: mean zero and covariance ``h I`` exactly, so every
conditional expectation is a finite average over child nodes. Node ``i`` at
depth ``n`` has children ``i * 2**k + s`` for pattern ``s``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .forward import build_resolvent
from .model import NoiseSchedule, SlqProblem
from .optimizer import iterate_paths, project_box
from .paths import BrownianEnsemble, TimeGrid

MAX_TREE_EXPONENT = 24


@dataclass(frozen=True, eq=False)
class TreeModel:
    grid: TimeGrid
    dim_k: int

    def __post_init__(self):
        if self.dim_k < 1:
            raise ValueError("dim_k must be positive")
        if self.grid.n_steps > 12:
            raise ValueError("tree oracle supports at most 12 time steps")
        if self.dim_k * self.grid.n_steps > MAX_TREE_EXPONENT:
            raise ValueError(
                f"k*N = {self.dim_k * self.grid.n_steps} exceeds {MAX_TREE_EXPONENT}"
            )

    @property
    def branching(self) -> int:
        return 2**self.dim_k

    @property
    def patterns(self) -> np.ndarray:
        """Increment vectors, shape ``(2**k, k)``; row ``s`` is pattern ``s``."""
        signs = np.array(list(itertools.product((1.0, -1.0), repeat=self.dim_k)))
        return signs * np.sqrt(self.grid.step_h)

    def n_nodes(self, depth: int) -> int:
        return self.branching**depth

    def node_of(self, leaf: np.ndarray | int, depth: int):
        """Ancestor at ``depth`` of a leaf (leaves live at depth N)."""
        return np.asarray(leaf) // self.branching ** (self.grid.n_steps - depth)

    def as_ensemble(self) -> BrownianEnsemble:
        """Every root-to-leaf path as one ensemble member, leaves in index order."""
        n, b = self.grid.n_steps, self.branching
        leaves = np.arange(b**n)
        inc = np.empty((leaves.size, n, self.dim_k))
        pats = self.patterns
        for depth in range(n):
            digit = (leaves // b ** (n - 1 - depth)) % b
            inc[:, depth] = pats[digit]
        return BrownianEnsemble(None, self.grid, inc)

    def average_children(self, values: np.ndarray) -> np.ndarray:
        """Exact ``E[. | parent]`` of node values one level down."""
        return values.reshape(-1, self.branching, *values.shape[1:]).mean(axis=1)


def tree_forward(problem: SlqProblem, tree: TreeModel, control) -> list[np.ndarray]:
    """States on every node: ``out[n]`` has shape ``(2**(k n), d)``."""
    n_steps = tree.grid.n_steps
    if len(control) != n_steps:
        raise ValueError(f"control covers {len(control)} depths, tree has {n_steps}")
    h = tree.grid.step_h
    base = build_resolvent(problem, tree.grid).base
    sig = problem.noise.on_grid(tree.grid)
    pats = tree.patterns
    states = [np.asarray(problem.x0, dtype=float)[None, :]]
    for n in range(n_steps):
        u = np.asarray(control[n], dtype=float)
        if u.shape != (tree.n_nodes(n), problem.dim_m):
            raise ValueError(f"control at depth {n} has shape {u.shape}")
        parent = states[n] + h * u @ problem.mat_N.T
        noise = pats @ sig[n].T
        child = (parent[:, None, :] + noise[None, :, :]).reshape(-1, problem.dim_d)
        states.append(child @ base.T)
    return states


def tree_backward_exact(problem: SlqProblem, tree: TreeModel, states) -> list[np.ndarray]:
    """``p_N = -D x_N``, ``(I - hM^T) p_n = E[p_{n+1} - h B x_{n+1} | node]``."""
    n_steps = tree.grid.n_steps
    h = tree.grid.step_h
    base = build_resolvent(problem, tree.grid).base
    p = [None] * (n_steps + 1)
    p[n_steps] = -states[n_steps] @ problem.mat_D.T
    for n in range(n_steps - 1, -1, -1):
        avg = tree.average_children(p[n + 1] - h * states[n + 1] @ problem.mat_B.T)
        p[n] = avg @ base
    return p


def tree_pgd(problem: SlqProblem, tree: TreeModel, initial_control, kappa: float, n_iters: int):
    """Projected gradient iterates with exact adjoints on the tree.

    Returns ``(controls, states, adjoints)``, each a list over ``l = 0..n_iters``
    of per-depth node arrays.
    """
    n_steps = tree.grid.n_steps
    c = np.broadcast_to(np.asarray(initial_control, dtype=float), (problem.dim_m,))
    u = [np.tile(c, (tree.n_nodes(n), 1)) for n in range(n_steps)]
    controls, states, adjoints = [], [], []
    for ell in range(n_iters + 1):
        x = tree_forward(problem, tree, u)
        p = tree_backward_exact(problem, tree, x)
        controls.append(u)
        states.append(x)
        adjoints.append(p)
        if ell == n_iters:
            break
        u = [
            project_box(
                u[n] - (problem.alpha * u[n] - p[n] @ problem.mat_N) / kappa,
                problem.bounds_lo,
                problem.bounds_hi,
            )
            for n in range(n_steps)
        ]
    return controls, states, adjoints


def tree_conditional_control(tree: TreeModel, control) -> dict[tuple[int, int], np.ndarray]:
    """Exact ``E[u_r | F_{t_n}]`` for ``r >= n``, keyed by ``(n, r)``.

    Values are node arrays at depth ``n`` of shape ``(2**(k n), m)``.
    """
    n_steps = tree.grid.n_steps
    out = {}
    for r in range(n_steps):
        vals = np.asarray(control[r], dtype=float)
        for n in range(r, -1, -1):
            out[(n, r)] = vals
            if n:
                vals = tree.average_children(vals)
    return out


def nodes_to_paths(tree: TreeModel, node_values: list[np.ndarray]) -> np.ndarray:
    """Spread per-depth node arrays onto leaf paths: ``(leaves, depths, ...)``."""
    n_steps = tree.grid.n_steps
    leaves = np.arange(tree.n_nodes(n_steps))
    return np.stack([v[tree.node_of(leaves, n)] for n, v in enumerate(node_values)], axis=1)


# --- verification battery -------------------------------------------------

FREE_TOL = 1e-10
CONSTRAINED_BOX = 0.1


@dataclass(frozen=True)
class TinyCase:
    label: str
    problem: SlqProblem
    n_steps: int
    kappa: float
    initial_control: np.ndarray

    @property
    def descriptor(self) -> str:
        p = self.problem
        return f"{self.label} d={p.dim_d} m={p.dim_m} k={p.dim_k} N={self.n_steps}"


@dataclass(frozen=True)
class CaseReport:
    case: TinyCase
    adjoint_error: float
    table_error: float
    gaps: tuple[float, ...]

    @property
    def free_ok(self) -> bool:
        return self.adjoint_error <= FREE_TOL and self.table_error <= FREE_TOL


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    diff = np.max(np.abs(a - b), initial=0.0)
    if diff == 0.0:
        return 0.0
    return float(diff / max(np.max(np.abs(b), initial=0.0), 1e-300))


def _random_psd(rng, d: int, kind: str) -> np.ndarray:
    if kind == "zero":
        return np.zeros((d, d))
    if kind == "identity":
        return np.eye(d)
    g = rng.standard_normal((d, d))
    return g @ g.T / d


def random_tiny_case(rng: np.random.Generator, label: str) -> TinyCase:
    """A random instance with ``d, m, k <= 2`` and ``N <= 4``."""
    d, m, k = (int(v) for v in rng.integers(1, 3, size=3))
    n_steps = int(rng.integers(1, 5))
    m_kind = rng.choice(["zero", "dissipative", "general"])
    if m_kind == "zero":
        mat_M, mat_M1 = np.zeros((d, d)), None
    elif m_kind == "dissipative":
        mat_M1 = rng.standard_normal((d, d))
        mat_M = -mat_M1 @ mat_M1.T
    else:
        mat_M, mat_M1 = rng.standard_normal((d, d)), None
    if rng.random() < 0.2:
        noise = NoiseSchedule.zero(d, k)
    else:
        noise = NoiseSchedule.sine(rng.standard_normal((d, k)), float(rng.uniform(0.5, 2.0)))
    problem = SlqProblem(
        dim_d=d,
        dim_m=m,
        dim_k=k,
        mat_M=mat_M,
        mat_M1=mat_M1,
        mat_N=rng.standard_normal((d, m)),
        mat_B=_random_psd(rng, d, rng.choice(["zero", "identity", "random"])),
        mat_D=_random_psd(rng, d, rng.choice(["zero", "identity", "random"])),
        alpha=float(rng.uniform(0.2, 1.5)),
        horizon_T=float(rng.uniform(0.3, 1.0)),
        x0=rng.standard_normal(d),
        bounds_lo=np.full(m, -np.inf),
        bounds_hi=np.full(m, np.inf),
        noise=noise,
    )
    c = rng.uniform(-0.5, 0.5, size=m) * CONSTRAINED_BOX
    return TinyCase(label, problem, n_steps, float(rng.uniform(1.0, 4.0)), c)


def default_battery(size: int = 24, seed: int = 2024) -> list[TinyCase]:
    rng = np.random.default_rng(seed)
    return [random_tiny_case(rng, f"case{i:02d}") for i in range(size)]


def recursion_history(problem: SlqProblem, tree: TreeModel, kappa, n_iters, initial_control):
    """Path-recursion adjoints and tables on every leaf path of the tree."""
    ens = tree.as_ensemble()
    res = build_resolvent(problem, tree.grid)
    adjoints, tables = [], []
    for _, _, _, table, p in iterate_paths(
        problem, tree.grid, res, ens.increments, kappa, n_iters, initial_control
    ):
        adjoints.append(p)
        tables.append(table)
    return adjoints, tables


def table_gap(tree: TreeModel, table: np.ndarray, exact: dict) -> float:
    """Largest componentwise ``|U[n, r] - E[u_r | F_{t_n}]|`` over paths and ``r >= n``."""
    leaves = np.arange(table.shape[0])
    gap = 0.0
    for (n, r), vals in exact.items():
        diff = np.abs(table[:, n, r] - vals[tree.node_of(leaves, n)])
        gap = max(gap, float(diff.max(initial=0.0)))
    return gap


def _table_rel_error(tree: TreeModel, table: np.ndarray, exact: dict) -> float:
    scale = max(float(np.max(np.abs(v), initial=0.0)) for v in exact.values())
    gap = table_gap(tree, table, exact)
    return 0.0 if gap == 0.0 else gap / max(scale, 1e-300)


def check_case(case: TinyCase, n_iters: int = 3) -> CaseReport:
    """Free-control exactness over ``l = 0..n_iters`` and constrained gaps at ``l = 1, 2``."""
    grid = TimeGrid(case.problem.horizon_T, case.n_steps)
    tree = TreeModel(grid, case.problem.dim_k)

    free = case.problem.with_free_control()
    t_u, _, t_p = tree_pgd(free, tree, case.initial_control, case.kappa, n_iters)
    r_p, r_tab = recursion_history(free, tree, case.kappa, n_iters, case.initial_control)
    adj_err = tab_err = 0.0
    for ell in range(n_iters + 1):
        adj_err = max(adj_err, relative_error(r_p[ell], nodes_to_paths(tree, t_p[ell])))
        exact = tree_conditional_control(tree, t_u[ell])
        tab_err = max(tab_err, _table_rel_error(tree, r_tab[ell], exact))

    boxed = case.problem.with_box(-CONSTRAINED_BOX, CONSTRAINED_BOX)
    t_u, _, _ = tree_pgd(boxed, tree, case.initial_control, case.kappa, 2)
    _, r_tab = recursion_history(boxed, tree, case.kappa, 2, case.initial_control)
    gaps = tuple(
        table_gap(tree, r_tab[ell], tree_conditional_control(tree, t_u[ell])) for ell in (1, 2)
    )
    return CaseReport(case, adj_err, tab_err, gaps)


def run_battery(cases: list[TinyCase] | None = None, n_iters: int = 3) -> list[CaseReport]:
    return [check_case(c, n_iters) for c in (cases or default_battery())]


def format_reports(reports: list[CaseReport]) -> str:
    lines = [
        f"{'instance':<32} {'adjoint err':>12} {'table err':>12} {'gap l=1':>12} {'gap l=2':>12}  status"
    ]
    for r in reports:
        lines.append(
            f"{r.case.descriptor:<32} {r.adjoint_error:12.3e} {r.table_error:12.3e} "
            f"{r.gaps[0]:12.3e} {r.gaps[1]:12.3e}  {'ok' if r.free_ok else 'FAIL'}"
        )
    return "\n".join(lines)
