"""Time grids, seeded Brownian increments and fine-to-coarse coupling."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class TimeGrid:
    horizon_T: float
    n_steps: int

    def __post_init__(self):
        if not self.horizon_T > 0:
            raise ValueError("horizon_T must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")
        object.__setattr__(self, "horizon_T", float(self.horizon_T))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def step_h(self) -> float:
        return self.horizon_T / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.step_h

    def refinement(self, fine: TimeGrid) -> int:
        """How many steps of ``fine`` make up one step of this grid."""
        if not np.isclose(fine.horizon_T, self.horizon_T, rtol=1e-12, atol=0.0):
            raise ValueError("grids have different horizons")
        if fine.n_steps % self.n_steps:
            raise ValueError(
                f"grid with {fine.n_steps} steps is not nested in one with {self.n_steps}"
            )
        return fine.n_steps // self.n_steps


@dataclass(frozen=True, eq=False)
class BrownianEnsemble:
    """Increments ``dw[path, n, :] ~ N(0, h I_k)`` for every path.

    ``seed`` is ``None`` for ensembles not produced by :func:`generate` (for
    example the binomial tree).
    """

    seed: int | None
    grid: TimeGrid
    increments: np.ndarray

    def __post_init__(self):
        inc = np.array(self.increments, dtype=float)
        if inc.ndim != 3 or inc.shape[1] != self.grid.n_steps:
            raise ValueError(
                f"increments must have shape (n_paths, {self.grid.n_steps}, k), got {inc.shape}"
            )
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def dim_k(self) -> int:
        return self.increments.shape[2]

    def subset(self, start: int, stop: int) -> BrownianEnsemble:
        return BrownianEnsemble(self.seed, self.grid, self.increments[start:stop])


def path_increments(seed: int, path: int, grid: TimeGrid, dim_k: int) -> np.ndarray:
    """Increments of a single path; depends only on ``(seed, path)`` and the grid.

    Each path owns a Philox stream keyed by ``(seed, path)``; time index ``n``
    reads normals ``n*k .. n*k + k - 1`` of that stream.
    """
    gen = np.random.Generator(np.random.Philox(key=[seed, path]))
    return gen.standard_normal((grid.n_steps, dim_k)) * np.sqrt(grid.step_h)


def generate(seed: int, n_paths: int, grid: TimeGrid, dim_k: int) -> BrownianEnsemble:
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    inc = np.empty((n_paths, grid.n_steps, dim_k))
    for p in range(n_paths):
        inc[p] = path_increments(seed, p, grid, dim_k)
    return BrownianEnsemble(seed, grid, inc)


def coarsen(fine: BrownianEnsemble, coarse_grid: TimeGrid) -> BrownianEnsemble:
    """Aggregate increments onto a nested coarser grid (same Brownian path)."""
    r = coarse_grid.refinement(fine.grid)
    blocks = fine.increments.reshape(fine.n_paths, coarse_grid.n_steps, r, fine.dim_k)
    acc = blocks[:, :, 0, :].copy()
    for j in range(1, r):
        acc += blocks[:, :, j, :]
    return BrownianEnsemble(fine.seed, coarse_grid, acc)


def sample_piecewise(values, fine_grid: TimeGrid, coarse_grid: TimeGrid, axis: int = 0):
    """Left-endpoint restriction of a fine trajectory to the coarse nodes.

    The time axis may have ``N`` entries (interval values such as controls) or
    ``N + 1`` entries (node values such as states).
    """
    r = coarse_grid.refinement(fine_grid)
    values = np.asarray(values)
    length = values.shape[axis]
    if length not in (fine_grid.n_steps, fine_grid.n_steps + 1):
        raise ValueError(f"time axis has length {length}, grid has {fine_grid.n_steps} steps")
    index = [slice(None)] * values.ndim
    index[axis] = slice(None, None, r)
    return values[tuple(index)]


_HEADER = struct.Struct("<4q")


def write_increments(ensemble: BrownianEnsemble, path) -> None:
    """Binary dump: header ``(seed, n_paths, N, k)`` as int64 then float64 data, little-endian."""
    seed = -1 if ensemble.seed is None else ensemble.seed
    header = _HEADER.pack(seed, ensemble.n_paths, ensemble.grid.n_steps, ensemble.dim_k)
    Path(path).write_bytes(header + ensemble.increments.astype("<f8").tobytes())


def read_increments(path, horizon_T: float) -> BrownianEnsemble:
    raw = Path(path).read_bytes()
    seed, n_paths, n_steps, dim_k = _HEADER.unpack_from(raw)
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if data.size != n_paths * n_steps * dim_k:
        raise ValueError("increment file is truncated or malformed")
    inc = data.reshape(n_paths, n_steps, dim_k).astype(float)
    return BrownianEnsemble(None if seed < 0 else seed, TimeGrid(horizon_T, n_steps), inc)
