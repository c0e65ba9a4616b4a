"""Problem instances for the constrained stochastic linear-quadratic control problem.

The state obeys ``dx = (M x + N u) dt + sigma(t) dw`` on ``[0, T]`` and the cost is

    J = 1/2 E[ int_0^T <x, B x> + alpha <u, u> dt + <x(T), D x(T)> ]

with controls restricted to the box ``bounds_lo <= u <= bounds_hi``.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

SYM_TOL = 1e-10
PSD_TOL = 1e-10
FACTOR_TOL = 1e-10

DEFAULT_ALPHA = 0.04
DEFAULT_HORIZON = 0.4
DEFAULT_BOUND = 2.0


def _frozen(a, ndim: int | None = None) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


class NoiseKind(str, enum.Enum):
    ZERO = "zero"
    SINE_MODULATED = "sine_modulated"
    TABLE_DRIVEN = "table_driven"


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Deterministic noise intensity ``sigma(t)`` of shape ``(d, k)``.

    ``SINE_MODULATED`` evaluates to ``amplitude * sin(pi t) * base_matrix``.
    ``TABLE_DRIVEN`` holds one matrix per uniform time cell of ``[0, T]`` and is
    piecewise constant (left endpoint) in between.
    """

    kind: NoiseKind
    base_matrix: np.ndarray
    amplitude: float = 0.0
    table: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        object.__setattr__(self, "base_matrix", _frozen(self.base_matrix, 2))
        if self.table is not None:
            table = _frozen(self.table, 3)
            if table.shape[1:] != self.base_matrix.shape:
                raise ValueError("noise table entries must match base_matrix shape")
            if table.shape[0] == 0:
                raise ValueError("noise table is empty")
            object.__setattr__(self, "table", table)
        elif self.kind is NoiseKind.TABLE_DRIVEN:
            raise ValueError("table_driven noise requires a table")

    @classmethod
    def zero(cls, dim_d: int, dim_k: int) -> NoiseSchedule:
        return cls(NoiseKind.ZERO, np.zeros((dim_d, dim_k)))

    @classmethod
    def sine(cls, base_matrix, amplitude: float = 0.5) -> NoiseSchedule:
        return cls(NoiseKind.SINE_MODULATED, base_matrix, float(amplitude))

    @classmethod
    def from_table(cls, table) -> NoiseSchedule:
        table = np.asarray(table, dtype=float)
        return cls(NoiseKind.TABLE_DRIVEN, np.zeros(table.shape[1:]), 0.0, table)

    @property
    def shape(self) -> tuple[int, int]:
        return self.base_matrix.shape

    def evaluate(self, t: float, horizon_T: float) -> np.ndarray:
        if self.kind is NoiseKind.ZERO:
            return np.zeros(self.shape)
        if self.kind is NoiseKind.SINE_MODULATED:
            return self.amplitude * math.sin(math.pi * t) * self.base_matrix
        n_cells = self.table.shape[0]
        idx = int(math.floor(t / horizon_T * n_cells + 1e-9))
        return self.table[min(max(idx, 0), n_cells - 1)].copy()

    def on_grid(self, grid) -> np.ndarray:
        """``sigma(t_n)`` for ``n = 0 .. N-1`` stacked into shape ``(N, d, k)``."""
        nodes = grid.nodes[:-1]
        return np.stack([self.evaluate(t, grid.horizon_T) for t in nodes])

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "base_matrix": self.base_matrix.tolist(),
            "amplitude": self.amplitude,
            "table": None if self.table is None else self.table.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> NoiseSchedule:
        return cls(
            NoiseKind(data["kind"]),
            np.array(data["base_matrix"], dtype=float),
            float(data.get("amplitude", 0.0)),
            None if data.get("table") is None else np.array(data["table"], dtype=float),
        )


@dataclass(frozen=True, eq=False)
class SlqProblem:
    """A complete SLQ instance. Arrays are copied and made read-only."""

    dim_d: int
    dim_m: int
    dim_k: int
    mat_M: np.ndarray
    mat_N: np.ndarray
    mat_B: np.ndarray
    mat_D: np.ndarray
    alpha: float
    horizon_T: float
    x0: np.ndarray
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    noise: NoiseSchedule
    mat_M1: np.ndarray | None = field(default=None)

    def __post_init__(self):
        for name in ("mat_M", "mat_N", "mat_B", "mat_D"):
            object.__setattr__(self, name, _frozen(getattr(self, name), 2))
        if self.mat_M1 is not None:
            object.__setattr__(self, "mat_M1", _frozen(self.mat_M1, 2))
        for name in ("x0", "bounds_lo", "bounds_hi"):
            object.__setattr__(self, name, _frozen(getattr(self, name), 1))
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "horizon_T", float(self.horizon_T))

    @property
    def is_free(self) -> bool:
        return bool(np.all(np.isinf(self.bounds_lo)) and np.all(np.isinf(self.bounds_hi)))

    def replace(self, **changes) -> SlqProblem:
        return dataclasses.replace(self, **changes)

    def with_free_control(self) -> SlqProblem:
        return self.replace(
            bounds_lo=np.full(self.dim_m, -np.inf), bounds_hi=np.full(self.dim_m, np.inf)
        )

    def with_box(self, lo, hi) -> SlqProblem:
        return self.replace(
            bounds_lo=np.broadcast_to(np.asarray(lo, float), (self.dim_m,)),
            bounds_hi=np.broadcast_to(np.asarray(hi, float), (self.dim_m,)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "dim_d": self.dim_d,
            "dim_m": self.dim_m,
            "dim_k": self.dim_k,
            "mat_M": self.mat_M.tolist(),
            "mat_M1": None if self.mat_M1 is None else self.mat_M1.tolist(),
            "mat_N": self.mat_N.tolist(),
            "mat_B": self.mat_B.tolist(),
            "mat_D": self.mat_D.tolist(),
            "alpha": self.alpha,
            "horizon_T": self.horizon_T,
            "x0": self.x0.tolist(),
            "bounds_lo": [_encode_bound(v) for v in self.bounds_lo],
            "bounds_hi": [_encode_bound(v) for v in self.bounds_hi],
            "noise": self.noise.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SlqProblem:
        return cls(
            dim_d=int(data["dim_d"]),
            dim_m=int(data["dim_m"]),
            dim_k=int(data["dim_k"]),
            mat_M=np.array(data["mat_M"], dtype=float),
            mat_M1=None if data.get("mat_M1") is None else np.array(data["mat_M1"], dtype=float),
            mat_N=np.array(data["mat_N"], dtype=float),
            mat_B=np.array(data["mat_B"], dtype=float),
            mat_D=np.array(data["mat_D"], dtype=float),
            alpha=float(data["alpha"]),
            horizon_T=float(data["horizon_T"]),
            x0=np.array(data["x0"], dtype=float),
            bounds_lo=np.array([_decode_bound(v) for v in data["bounds_lo"]], dtype=float),
            bounds_hi=np.array([_decode_bound(v) for v in data["bounds_hi"]], dtype=float),
            noise=NoiseSchedule.from_dict(data["noise"]),
        )


# Strict JSON has no infinity literal; free bounds are written as strings.
def _encode_bound(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return float(v)


def _decode_bound(v) -> float:
    return float(v)


def dump_problem(problem: SlqProblem, path) -> None:
    Path(path).write_text(json.dumps(problem.to_dict(), indent=2))


def load_problem(path) -> SlqProblem:
    return SlqProblem.from_dict(json.loads(Path(path).read_text()))


def _check_psd(name: str, mat: np.ndarray, d: int, out: list[str]) -> None:
    if mat.shape != (d, d):
        out.append(f"{name} has shape {mat.shape}, expected {(d, d)}")
        return
    if np.max(np.abs(mat - mat.T), initial=0.0) > SYM_TOL:
        out.append(f"{name} not symmetric")
        return
    if np.linalg.eigvalsh(mat).min(initial=0.0) < -PSD_TOL:
        out.append(f"{name} not positive semi-definite")


def validate(problem: SlqProblem) -> list[str]:
    """Return every invariant violation as a message naming the field; empty if valid."""
    p = problem
    d, m, k = p.dim_d, p.dim_m, p.dim_k
    out: list[str] = []
    for name, val in (("dim_d", d), ("dim_m", m), ("dim_k", k)):
        if val < 1:
            out.append(f"{name} must be a positive integer")
    if p.mat_M.shape != (d, d):
        out.append(f"mat_M has shape {p.mat_M.shape}, expected {(d, d)}")
    if p.mat_N.shape != (d, m):
        out.append(f"mat_N has shape {p.mat_N.shape}, expected {(d, m)}")
    _check_psd("mat_B", p.mat_B, d, out)
    _check_psd("mat_D", p.mat_D, d, out)
    if p.mat_M1 is not None:
        if p.mat_M1.shape != (d, d):
            out.append(f"mat_M1 has shape {p.mat_M1.shape}, expected {(d, d)}")
        elif p.mat_M.shape == (d, d):
            resid = np.linalg.norm(p.mat_M + p.mat_M1 @ p.mat_M1.T)
            if resid > FACTOR_TOL * (1.0 + np.linalg.norm(p.mat_M)):
                out.append("mat_M1 does not factor mat_M as -M1 M1^T")
    if not p.alpha > 0:
        out.append("alpha must be positive")
    if not p.horizon_T > 0:
        out.append("horizon_T must be positive")
    if p.x0.shape != (d,):
        out.append(f"x0 has length {p.x0.shape[0]}, expected {d}")
    if p.bounds_lo.shape != (m,) or p.bounds_hi.shape != (m,):
        out.append("bounds_lo/bounds_hi must have length dim_m")
    else:
        for i in np.flatnonzero(~(p.bounds_lo <= p.bounds_hi)):
            out.append(f"bounds_lo exceeds bounds_hi at index {i}")
    if p.noise.shape != (d, k):
        out.append(f"noise has shape {p.noise.shape}, expected {(d, k)}")
    return out


def make_paper_example(seed: int, *, per_index_noise_steps: int | None = None) -> SlqProblem:
    """The d=10, m=k=4 benchmark with B = D = I, box [-2, 2], alpha = 0.04, T = 0.4.

    The drift is ``M = -M1 M1^T``; ``M1``, ``N`` and the noise base matrix are
    drawn once from ``default_rng(seed)`` with i.i.d. standard normal entries
    scaled by ``1/sqrt(d)``. The initial state is the all-ones vector. Passing
    ``per_index_noise_steps`` instead builds a table of independent matrices, one
    per time index of that grid, modulated by ``0.5 sin(pi t_n)``.
    """
    d, m, k = 10, 4, 4
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(d)
    mat_M1 = rng.standard_normal((d, d)) * scale
    mat_N = rng.standard_normal((d, m)) * scale
    sigma1 = rng.standard_normal((d, k)) * scale
    if per_index_noise_steps is None:
        noise = NoiseSchedule.sine(sigma1, 0.5)
    else:
        n = per_index_noise_steps
        mats = rng.standard_normal((n, d, k)) * scale
        t = np.arange(n) * (DEFAULT_HORIZON / n)
        noise = NoiseSchedule.from_table(0.5 * np.sin(np.pi * t)[:, None, None] * mats)
    return SlqProblem(
        dim_d=d,
        dim_m=m,
        dim_k=k,
        mat_M=-mat_M1 @ mat_M1.T,
        mat_M1=mat_M1,
        mat_N=mat_N,
        mat_B=np.eye(d),
        mat_D=np.eye(d),
        alpha=DEFAULT_ALPHA,
        horizon_T=DEFAULT_HORIZON,
        x0=np.ones(d),
        bounds_lo=np.full(m, -DEFAULT_BOUND),
        bounds_hi=np.full(m, DEFAULT_BOUND),
        noise=noise,
    )


def laplacian_matrix(grid_points: int) -> tuple[np.ndarray, np.ndarray]:
    """Dirichlet Laplacian ``M`` on ``grid_points`` interior nodes and a bidiagonal ``M1``."""
    if grid_points < 2:
        raise ValueError("grid_points must be at least 2")
    dx = 1.0 / (grid_points + 1)
    tri = 2.0 * np.eye(grid_points) - np.eye(grid_points, k=1) - np.eye(grid_points, k=-1)
    mat_M = -tri / dx**2
    # Cholesky of a tridiagonal SPD matrix is lower bidiagonal
    mat_M1 = np.linalg.cholesky(tri) / dx
    return mat_M, mat_M1


def _block_indicator(d: int, cols: int) -> np.ndarray:
    out = np.zeros((d, cols))
    for i, block in enumerate(np.array_split(np.arange(d), cols)):
        out[block, i] = 1.0
    return out


def make_laplacian_preset(grid_points: int, dim_m: int = 2, dim_k: int = 2) -> SlqProblem:
    """Heat-equation style preset: ``M`` is the scaled discrete Dirichlet Laplacian.

    Controls and noise act on contiguous blocks of grid nodes; the initial state
    is ``sin(pi x)`` sampled at the interior nodes.
    """
    mat_M, mat_M1 = laplacian_matrix(grid_points)
    if dim_m < 1 or dim_k < 1:
        raise ValueError("dim_m and dim_k must be positive")
    d = grid_points
    xs = np.arange(1, d + 1) / (d + 1)
    return SlqProblem(
        dim_d=d,
        dim_m=dim_m,
        dim_k=dim_k,
        mat_M=mat_M,
        mat_M1=mat_M1,
        mat_N=_block_indicator(d, dim_m),
        mat_B=np.eye(d),
        mat_D=np.eye(d),
        alpha=DEFAULT_ALPHA,
        horizon_T=DEFAULT_HORIZON,
        x0=np.sin(np.pi * xs),
        bounds_lo=np.full(dim_m, -DEFAULT_BOUND),
        bounds_hi=np.full(dim_m, DEFAULT_BOUND),
        noise=NoiseSchedule.sine(_block_indicator(d, dim_k), 0.5),
    )


PRESETS = {
    "paper": lambda seed: make_paper_example(seed),
    "laplacian": lambda seed: make_laplacian_preset(10, 2, 2),
}


def make_preset(name: str, seed: int = 1) -> SlqProblem:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(seed)
