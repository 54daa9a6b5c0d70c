"""
Noise Module
Time grids and reproducible Brownian increments for the K-mode
truncated cylindrical Wiener process.
"""

import csv
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy import special

SEED_LIMIT = 2 ** 64
MANTISSA_BITS = 53


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_j = j T / M on [0, T]"""
    horizon: float
    steps: int

    def __post_init__(self):
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise ValueError(f"Time horizon must be positive, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"Number of steps must be a positive integer, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        nodes = np.arange(self.steps + 1) * self.dt
        nodes[-1] = self.horizon
        return nodes

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.horizon, self.steps * factor)


@dataclass(frozen=True, eq=False)
class NoisePath:
    """
    Brownian increments dW[j, k] ~ N(0, dt) for step j and mode k.

    Carries the (seed, replica) key it was generated from so that
    downstream checks can verify provenance.
    """
    increments: np.ndarray
    grid: TimeGrid
    seed: Optional[int] = None
    replica: int = 0

    def __post_init__(self):
        increments = np.array(self.increments, dtype=float)
        if increments.ndim != 2 or increments.shape[0] != self.grid.steps:
            raise ValueError(
                f"Noise increments must have shape ({self.grid.steps}, K), got {increments.shape}"
            )
        increments.setflags(write=False)
        object.__setattr__(self, "increments", increments)

    @property
    def modes(self) -> int:
        return self.increments.shape[1]

    def brownian_path(self) -> np.ndarray:
        """W at the grid nodes, shape (M + 1, K), W_0 = 0"""
        return np.vstack([np.zeros((1, self.modes)), np.cumsum(self.increments, axis=0)])

    def coarsen(self, factor: int) -> "NoisePath":
        """Same Brownian path seen on a grid with steps / factor steps"""
        if factor < 1 or self.grid.steps % factor != 0:
            raise ValueError(f"Cannot coarsen {self.grid.steps} steps by {factor}")
        coarse = self.increments.reshape(-1, factor, self.modes).sum(axis=1)
        return NoisePath(coarse, TimeGrid(self.grid.horizon, self.grid.steps // factor),
                         self.seed, self.replica)

    def negated(self) -> "NoisePath":
        """Antithetic partner -dW"""
        return NoisePath(-self.increments, self.grid, self.seed, self.replica)

    def save_csv(self, path: str):
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["step"] + [f"dW_{k + 1}" for k in range(self.modes)])
            for j, row in enumerate(self.increments):
                writer.writerow([j] + [repr(float(v)) for v in row])


def _check_key(seed: int, replica: int):
    if not (0 <= seed < SEED_LIMIT):
        raise ValueError(f"Seed must be an unsigned 64-bit integer, got {seed}")
    if not (0 <= replica < SEED_LIMIT):
        raise ValueError(f"Replica index must be an unsigned 64-bit integer, got {replica}")


def _mode_stream(seed: int, replica: int, mode: int, steps: int) -> np.ndarray:
    """
    Standard normals for one mode: raw output j of Philox keyed by (seed, replica)
    with the mode in the third counter word, mapped through the inverse normal CDF.
    Every raw draw is consumed, so step j always reads counter position j.
    """
    counter = np.array([0, 0, mode, 0], dtype=np.uint64)
    key = np.array([seed, replica], dtype=np.uint64)
    raw = np.random.Philox(key=key, counter=counter).random_raw(steps)
    u = ((raw >> np.uint64(64 - MANTISSA_BITS)).astype(float) + 0.5) * 2.0 ** -MANTISSA_BITS
    return special.ndtri(u)


def sample_noise(grid: TimeGrid, K: int, seed: int, replica: int = 0) -> NoisePath:
    """
    Gaussian increments with variance dt, independent across steps and modes.

    Increment (j, k) is a pure function of (seed, replica, step j, mode k): the
    Philox key is (seed, replica), the mode selects a counter word and the step
    is the position within that stream. A replica's path never depends on which
    other replicas were generated, and adding steps or modes leaves the
    existing entries unchanged.
    """
    if K < 1:
        raise ValueError(f"Number of noise modes must be at least 1, got {K}")
    seed, replica = int(seed), int(replica)
    _check_key(seed, replica)
    normals = np.stack([_mode_stream(seed, replica, k, grid.steps) for k in range(K)], axis=1)
    return NoisePath(normals * np.sqrt(grid.dt), grid, seed, replica)


def sample_noise_batch(grid: TimeGrid, K: int, seed: int, replicas: Iterable[int]) -> np.ndarray:
    """Stacked increments for several replicas, shape (R, M, K)"""
    return np.stack([sample_noise(grid, K, seed, r).increments for r in replicas])
