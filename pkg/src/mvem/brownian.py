"""Seeded Brownian increments on uniform grids with exact coarse/fine coupling.

Each particle draws from its own generator, seeded from
``SeedSequence(master_seed, spawn_key=(BROWNIAN_TAG, family, particle_id))``;
numpy's SeedSequence hashing is the mixing function. Normals come from
``PCG64`` via ``Generator.standard_normal`` (ziggurat), drawn row by row,
so a stream depends only on its key and length.

A stream stores the Brownian path at the grid points (left-to-right cumulative
sums of the fine draws). Increments are differences of that path and coarsening
is subsampling, so ``coarsen(coarsen(s, f1), f2)`` equals ``coarsen(s, f1*f2)``
bitwise and the terminal value W_T is shared by every scale.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

BROWNIAN_TAG = 0x42524F57  # "BROW"
DUMP_MAGIC = b"MVEMBRW1"


@dataclass(frozen=True)
class TimeGrid:
    h: float
    n_steps: int

    def __post_init__(self):
        if not (0.0 < self.h < 1.0):
            raise ValueError(f"step size must lie in (0, 1), got {self.h}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 0:
            raise ValueError(f"n_steps must be a non-negative integer, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @classmethod
    def from_horizon(cls, h: float, T: float) -> "TimeGrid":
        return cls(h, steps_for(T, h))

    @property
    def T(self) -> float:
        return self.n_steps * self.h

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.h


def steps_for(T: float, h: float, rtol: float = 1e-9) -> int:
    """Number of steps of size h covering [0, T]; T must be a multiple of h."""
    n = round(T / h)
    if abs(n * h - T) > rtol * max(T, h):
        raise ValueError(f"horizon T={T} is not a multiple of h={h}")
    return int(n)


def ratio(coarse_h: float, fine_h: float, rtol: float = 1e-9) -> int:
    """Integer factor coarse_h / fine_h, or ValueError when it is not an integer."""
    f = round(coarse_h / fine_h)
    if f < 1 or abs(f * fine_h - coarse_h) > rtol * coarse_h:
        raise ValueError(f"h={coarse_h} is not an integer multiple of h_ref={fine_h}")
    return int(f)


def stream_seed(master_seed: int, particle_id: int, family: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master_seed), spawn_key=(BROWNIAN_TAG, int(family), int(particle_id)))


def derive_seed(master_seed: int, *keys: int) -> int:
    """A 63-bit seed for a named sub-experiment, independent of stream keys."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _normals(master_seed, particle_id, family, n, d) -> np.ndarray:
    gen = np.random.Generator(np.random.PCG64(stream_seed(master_seed, particle_id, family)))
    return gen.standard_normal((n, d))


@dataclass(frozen=True)
class IncrementStream:
    seed: int
    particle_id: int
    grid: TimeGrid
    path: np.ndarray  # (n_steps + 1, d), path[0] == 0
    family: int = 0

    @property
    def d(self) -> int:
        return self.path.shape[1]

    @property
    def values(self) -> np.ndarray:
        """Increments W_{(k+1)h} - W_{kh}, shape (n_steps, d)."""
        return np.diff(self.path, axis=0)

    @property
    def terminal(self) -> np.ndarray:
        return self.path[-1]


def _path_from_normals(z: np.ndarray, h: float) -> np.ndarray:
    inc = z * math.sqrt(h)
    path = np.zeros((z.shape[0] + 1,) + z.shape[1:])
    np.cumsum(inc, axis=0, out=path[1:])
    return path


def sample_increments(seed: int, particle_id: int, grid: TimeGrid, d: int = 1,
                      family: int = 0) -> IncrementStream:
    z = _normals(seed, particle_id, family, grid.n_steps, d)
    return IncrementStream(int(seed), int(particle_id), grid, _path_from_normals(z, grid.h), int(family))


def coarsen(stream: IncrementStream, factor: int) -> IncrementStream:
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    if stream.grid.n_steps % factor:
        raise ValueError(f"factor {factor} does not divide n_steps={stream.grid.n_steps}")
    grid = TimeGrid(stream.grid.h * factor, stream.grid.n_steps // factor)
    return IncrementStream(stream.seed, stream.particle_id, grid, stream.path[::factor].copy(), stream.family)


def sample_paths(seed: int, particle_ids, grid: TimeGrid, d: int = 1, family: int = 0) -> np.ndarray:
    """Brownian paths for many particles, shape (P, n_steps + 1, d).

    Row p equals ``sample_increments(seed, particle_ids[p], grid, d, family).path``.
    """
    ids = np.asarray(particle_ids, dtype=np.int64).reshape(-1)
    out = np.zeros((ids.size, grid.n_steps + 1, d))
    scale = math.sqrt(grid.h)
    for row, pid in enumerate(ids):
        z = _normals(seed, int(pid), family, grid.n_steps, d)
        np.cumsum(z * scale, axis=0, out=out[row, 1:])
    return out


def increments_from_paths(paths: np.ndarray, factor: int = 1) -> np.ndarray:
    """Increments on the grid coarsened by ``factor``; paths is (..., n+1, d)."""
    if (paths.shape[-2] - 1) % factor:
        raise ValueError(f"factor {factor} does not divide n_steps={paths.shape[-2] - 1}")
    return np.diff(paths[..., ::factor, :], axis=-2)


def dump_stream(stream: IncrementStream, path) -> None:
    """Binary debug dump: 16-byte header (8-byte magic, uint32 d, uint32 n_steps)
    followed by the increments as little-endian float64, row-major."""
    vals = np.ascontiguousarray(stream.values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(struct.pack("<II", stream.d, stream.grid.n_steps))
        fh.write(vals.tobytes())


def load_dump(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:8] != DUMP_MAGIC:
            raise ValueError(f"{path} is not an increment dump")
        d, n = struct.unpack("<II", header[8:])
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != n * d:
        raise ValueError(f"{path}: expected {n * d} values, found {data.size}")
    return data.reshape(n, d).astype(np.float64)
