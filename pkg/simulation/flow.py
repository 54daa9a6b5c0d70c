"""
Flow Module
Time stepping for the epsilon-scaled SDE with interaction, its controlled
version and the deterministic skeleton equation; trajectory storage and the
weighted sup-norm on C([0,T], C_delta(R^d)).

All solvers share one stepping kernel that works on a batch of R replicas
at once: states have shape (R, N, d) where the first n of the N tracked
points are the particles of the ensemble and the rest are zero-weight
evaluation points. Every replica sees its own empirical measure and its
own noise; within a replica all points share one noise path.
"""

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

import numpy as np

from coefficients import CoefficientField
from errors import BlowUpError, BudgetError
from measure import Ensemble, pushforward, wasserstein2
from noise import NoisePath, TimeGrid

logger = logging.getLogger(__name__)

BUDGET_TOLERANCE = 1e-12


class Scheme(Enum):
    """Time-stepping scheme of a run"""
    EULER = "euler"
    HEUN = "heun"


@dataclass(frozen=True, eq=False)
class ControlPath:
    """Piecewise-constant control h_j in R^K on the steps of a grid"""
    values: np.ndarray
    grid: TimeGrid
    budget: Optional[float] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] != self.grid.steps:
            raise ValueError(f"Control values must have shape ({self.grid.steps}, K), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("Control values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.budget is not None and not self.in_budget(self.budget):
            raise BudgetError(
                f"Control with integral |h|^2 dt = {self.squared_norm():.6g} exceeds budget N = {self.budget}"
            )

    @classmethod
    def zeros(cls, grid: TimeGrid, K: int) -> "ControlPath":
        return cls(np.zeros((grid.steps, K)), grid)

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "ControlPath":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(np.tile(value, (grid.steps, 1)), grid)

    @classmethod
    def from_function(cls, grid: TimeGrid, fn) -> "ControlPath":
        """h_j = fn(t_j) at the left node of every step"""
        return cls(np.array([np.atleast_1d(fn(t)) for t in grid.nodes[:-1]], dtype=float), grid)

    @property
    def modes(self) -> int:
        return self.values.shape[1]

    def squared_norm(self) -> float:
        """integral_0^T |h(t)|^2 dt, exact for piecewise-constant h"""
        return float(np.sum(self.values ** 2) * self.grid.dt)

    def in_budget(self, budget: float) -> bool:
        """Membership in H^N = {h : integral |h|^2 dt <= N}"""
        return self.squared_norm() <= budget * (1.0 + BUDGET_TOLERANCE)

    def scaled(self, c: float) -> "ControlPath":
        return ControlPath(c * self.values, self.grid)

    def is_zero(self) -> bool:
        return not np.any(self.values)

    def save_csv(self, path: str):
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "time"] + [f"h_{k + 1}" for k in range(self.modes)])
            for j, (t, row) in enumerate(zip(self.grid.nodes[:-1], self.values)):
                writer.writerow([j, repr(float(t))] + [repr(float(v)) for v in row])


@dataclass(frozen=True)
class NormSpec:
    """Weight exponent delta and moment order m of the trajectory space"""
    delta: float = 0.25
    m: int = 6

    def __post_init__(self):
        if not (0.0 < self.delta < 1.0 / 3.0):
            raise ValueError(f"delta must lie in (0, 1/3), got {self.delta}")
        if int(self.m) != self.m or self.m % 2 != 0:
            raise ValueError(f"m must be an even integer, got {self.m}")
        if self.m <= 1.0 / self.delta:
            raise ValueError(f"m = {self.m} must exceed 1/delta = {1.0 / self.delta:.4g}")

    @classmethod
    def for_dimension(cls, dim: int, delta: float = 0.25) -> "NormSpec":
        """Smallest even m with m > max(1/delta, 2d)"""
        m = int(np.floor(max(1.0 / delta, 2.0 * dim))) + 1
        if m % 2:
            m += 1
        return cls(delta, m)

    def check_dimension(self, dim: int):
        if self.m <= 2 * dim:
            raise ValueError(f"m = {self.m} must exceed 2d = {2 * dim}")

    def weight(self, points: np.ndarray) -> np.ndarray:
        """1 + |x|^(1 + delta) for points of shape (N, d)"""
        return 1.0 + np.linalg.norm(points, axis=1) ** (1.0 + self.delta)

    def to_dict(self) -> Dict:
        return {"delta": self.delta, "m": self.m}


@dataclass(frozen=True, eq=False)
class FlowTrajectory:
    """
    States X_{t_j}(x_i) on a grid for the ensemble particles followed by the
    evaluation points. Provenance (seed, replica, epsilon, scheme) is kept so
    that residual checks can refuse foreign noise.
    """
    states: np.ndarray
    initial: Ensemble
    grid: TimeGrid
    eval_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))
    seed: Optional[int] = None
    replica: int = 0
    epsilon: Optional[float] = None
    scheme: Scheme = Scheme.EULER

    def __post_init__(self):
        states = np.array(self.states, dtype=float)
        eval_points = np.asarray(self.eval_points, dtype=float).reshape(-1, self.initial.dim)
        expected = (self.grid.steps + 1, self.initial.n + eval_points.shape[0], self.initial.dim)
        if states.shape != expected:
            raise ValueError(f"Trajectory states must have shape {expected}, got {states.shape}")
        states.setflags(write=False)
        eval_points.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "eval_points", eval_points)

    @property
    def n(self) -> int:
        return self.initial.n

    @property
    def tracked_points(self) -> np.ndarray:
        """Initial positions of all tracked points, particles first"""
        return np.vstack([self.initial.points, self.eval_points])

    @property
    def particle_states(self) -> np.ndarray:
        return self.states[:, :self.n]

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    def provenance(self) -> Dict:
        return {
            "seed": self.seed,
            "replica": self.replica,
            "epsilon": self.epsilon,
            "scheme": self.scheme.value,
        }


# -- stepping kernel -------------------------------------------------------------

def _check_finite(x: np.ndarray, step: int, replica_offset: int = 0):
    finite = np.isfinite(x).all(axis=2)
    if not finite.all():
        r, i = np.argwhere(~finite)[0]
        raise BlowUpError(step, int(i), int(r) + replica_offset)


def _point_statistics(field: CoefficientField, x: np.ndarray, n: int, weights: np.ndarray) -> np.ndarray:
    """Per-point statistic rows (R * N, q) from the particle block of x (R, N, d)"""
    R, N, _ = x.shape
    s = field.statistics(x[:, :n], weights)
    return np.repeat(s, N, axis=0)


def _rate(field: CoefficientField, t: float, flat: np.ndarray, s: np.ndarray,
          h: Optional[np.ndarray]) -> np.ndarray:
    """V + G h on flattened points, h of shape (K,)"""
    v = field.drift_at(t, flat, s)
    if h is None:
        return v
    return v + field.diffusion_at(t, flat, s) @ h


def integrate(field: CoefficientField, x0: np.ndarray, weights: np.ndarray, n: int,
              grid: TimeGrid, epsilon: float = 0.0, increments: Optional[np.ndarray] = None,
              control: Optional[np.ndarray] = None, scheme: Scheme = Scheme.EULER,
              keep_path: bool = True, replica_offset: int = 0) -> np.ndarray:
    """
    Advance R replicas of a tracked point set through the grid.

    x0: (R, N, d) initial states, the first n rows of each replica are the
    weighted particles. increments: (R, M, K) Brownian increments or None.
    control: (M, K) or None. Returns (R, M+1, N, d) when keep_path else the
    terminal states (R, N, d).
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be nonnegative, got {epsilon}")
    R, N, d = x0.shape
    dt = grid.dt
    nodes = grid.nodes
    K = field.modes
    use_noise = increments is not None and epsilon > 0.0
    if use_noise and increments.shape != (R, grid.steps, K):
        raise ValueError(f"Noise increments must have shape {(R, grid.steps, K)}, got {increments.shape}")
    if scheme is Scheme.HEUN and use_noise:
        raise ValueError("Heun steps are only defined for the noise-free skeleton")
    sqrt_eps = np.sqrt(epsilon)

    x = np.array(x0, dtype=float)
    path = np.empty((R, grid.steps + 1, N, d)) if keep_path else None
    if keep_path:
        path[:, 0] = x

    for j in range(grid.steps):
        t = nodes[j]
        h = None if control is None or not np.any(control[j]) else control[j]
        flat = x.reshape(R * N, d)
        s = _point_statistics(field, x, n, weights)

        if scheme is Scheme.HEUN:
            k1 = _rate(field, t, flat, s, h)
            predicted = flat + dt * k1
            k2 = _rate(field, nodes[j + 1], predicted, s, h)
            nxt = flat + (0.5 * dt) * (k1 + k2)
        else:
            nxt = flat + field.drift_at(t, flat, s) * dt
            if use_noise or h is not None:
                g = field.diffusion_at(t, flat, s)
                if use_noise:
                    dw = np.repeat(increments[:, j], N, axis=0)
                    nxt = nxt + sqrt_eps * np.einsum("bdk,bk->bd", g, dw)
                if h is not None:
                    nxt = nxt + (g @ h) * dt

        x = nxt.reshape(R, N, d)
        _check_finite(x, j + 1, replica_offset)
        if keep_path:
            path[:, j + 1] = x

    return path if keep_path else x


def _tracked(init: Ensemble, eval_points: Optional[np.ndarray]) -> np.ndarray:
    if eval_points is None:
        return init.points.copy()
    extra = np.asarray(eval_points, dtype=float).reshape(-1, init.dim)
    return np.vstack([init.points, extra])


def _check_field(field: CoefficientField, init: Ensemble):
    if field.dim != init.dim:
        raise ValueError(f"{field} cannot act on an ensemble in R^{init.dim}")


def _check_noise(field: CoefficientField, noise: NoisePath, grid: TimeGrid):
    if noise.grid != grid:
        raise ValueError(f"Noise grid {noise.grid} does not match solver grid {grid}")
    if noise.modes != field.modes:
        raise ValueError(f"Noise has {noise.modes} modes but {field} needs {field.modes}")


def _check_control(field: CoefficientField, control: ControlPath, grid: TimeGrid):
    if control.grid != grid:
        raise ValueError(f"Control grid {control.grid} does not match solver grid {grid}")
    if control.modes != field.modes:
        raise ValueError(f"Control has {control.modes} modes but {field} needs {field.modes}")


# -- solvers -----------------------------------------------------------------------

def solve_sde(field: CoefficientField, init: Ensemble, noise: NoisePath, epsilon: float,
              grid: TimeGrid, eval_points: Optional[np.ndarray] = None) -> FlowTrajectory:
    """Euler-Maruyama for dX = V dt + sqrt(eps) G dW with one common noise path"""
    return solve_controlled(field, init, noise, epsilon, None, grid, eval_points)


def solve_controlled(field: CoefficientField, init: Ensemble, noise: NoisePath, epsilon: float,
                     control: Optional[ControlPath], grid: TimeGrid,
                     eval_points: Optional[np.ndarray] = None) -> FlowTrajectory:
    """Euler-Maruyama for dX = [V + G h] dt + sqrt(eps) G dW"""
    _check_field(field, init)
    _check_noise(field, noise, grid)
    if control is not None:
        _check_control(field, control, grid)
    tracked = _tracked(init, eval_points)
    states = integrate(
        field, tracked[None], init.weights, init.n, grid, epsilon,
        increments=noise.increments[None],
        control=None if control is None else control.values,
        replica_offset=noise.replica,
    )[0]
    return FlowTrajectory(states, init, grid, tracked[init.n:], noise.seed, noise.replica,
                          float(epsilon), Scheme.EULER)


def solve_skeleton(field: CoefficientField, init: Ensemble, control: ControlPath, grid: TimeGrid,
                   eval_points: Optional[np.ndarray] = None,
                   scheme: Scheme = Scheme.HEUN) -> FlowTrajectory:
    """
    Deterministic solver for dX = [V + G h] dt with mu^h_t the pushforward.

    Heun steps by default; Scheme.EULER gives the consistency mode that
    matches solve_controlled with epsilon = 0 bitwise.
    """
    _check_field(field, init)
    _check_control(field, control, grid)
    tracked = _tracked(init, eval_points)
    states = integrate(field, tracked[None], init.weights, init.n, grid,
                       control=control.values, scheme=scheme)[0]
    return FlowTrajectory(states, init, grid, tracked[init.n:], None, 0, None, scheme)


def solve_sde_batch(field: CoefficientField, init: Ensemble, grid: TimeGrid, epsilon: float,
                    increments: np.ndarray, control: Optional[ControlPath] = None,
                    eval_points: Optional[np.ndarray] = None, keep_path: bool = True,
                    replica_offset: int = 0) -> np.ndarray:
    """
    Many independent replicas in one vectorized sweep.

    increments has shape (R, M, K), one noise path per replica. Returns the
    tracked states (R, M+1, N, d), or (R, N, d) at the horizon when
    keep_path is False.
    """
    _check_field(field, init)
    if control is not None:
        _check_control(field, control, grid)
    tracked = _tracked(init, eval_points)
    R = increments.shape[0]
    x0 = np.broadcast_to(tracked, (R,) + tracked.shape)
    return integrate(field, x0, init.weights, init.n, grid, epsilon,
                     increments=increments,
                     control=None if control is None else control.values,
                     keep_path=keep_path, replica_offset=replica_offset)


# -- norms and measure paths ---------------------------------------------------------

def _check_comparable(a: FlowTrajectory, b: FlowTrajectory):
    if a.grid != b.grid:
        raise ValueError(f"Trajectories live on different grids: {a.grid} vs {b.grid}")
    if a.states.shape != b.states.shape or not np.array_equal(a.tracked_points, b.tracked_points):
        raise ValueError("Trajectories do not track the same initial points")


def weighted_sup_norm(a: FlowTrajectory, b: FlowTrajectory, spec: NormSpec) -> float:
    """max_j max_i |a - b| / (1 + |x_i|^(1 + delta)) over all tracked points"""
    _check_comparable(a, b)
    spec.check_dimension(a.initial.dim)
    diff = np.linalg.norm(a.states - b.states, axis=2)
    return float(np.max(diff / spec.weight(a.tracked_points)[None, :]))


def sup_norm(a: FlowTrajectory, b: FlowTrajectory) -> float:
    _check_comparable(a, b)
    return float(np.max(np.linalg.norm(a.states - b.states, axis=2)))


def local_sup_norm(a: FlowTrajectory, b: FlowTrajectory, radius: float) -> float:
    """Unweighted sup over tracked points starting in the ball |x| <= radius"""
    _check_comparable(a, b)
    inside = np.linalg.norm(a.tracked_points, axis=1) <= radius
    if not inside.any():
        return 0.0
    diff = np.linalg.norm(a.states[:, inside] - b.states[:, inside], axis=2)
    return float(np.max(diff))


def measure_path(traj: FlowTrajectory) -> List[Ensemble]:
    """mu_{t_j} = mu_0 o X_{t_j}^{-1} for every node"""
    return [pushforward(traj.initial, traj.particle_states[j]) for j in range(traj.grid.steps + 1)]


def measure_path_distance(a: FlowTrajectory, b: FlowTrajectory) -> float:
    """max_j W_2 between the two measure paths"""
    if a.grid != b.grid:
        raise ValueError(f"Trajectories live on different grids: {a.grid} vs {b.grid}")
    return max(wasserstein2(mu, nu) for mu, nu in zip(measure_path(a), measure_path(b)))


# -- export ------------------------------------------------------------------------

def save_trajectory_csv(traj: FlowTrajectory, path: str):
    """Long format: step, time, particle, x_1..x_d"""
    d = traj.initial.dim
    nodes = traj.grid.nodes
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "time", "particle"] + [f"x_{k + 1}" for k in range(d)])
        for j, frame in enumerate(traj.states):
            for i, x in enumerate(frame):
                writer.writerow([j, repr(float(nodes[j])), i] + [repr(float(v)) for v in x])


def save_trajectory_binary(traj: FlowTrajectory, path: str):
    """
    Little-endian layout: int64 header (d, N, M) followed by the
    (M+1) x N x d states as row-major float64.
    """
    steps, N, d = traj.states.shape
    with open(path, "wb") as f:
        np.array([d, N, steps - 1], dtype="<i8").tofile(f)
        np.ascontiguousarray(traj.states, dtype="<f8").tofile(f)


def load_trajectory_binary(path: str) -> np.ndarray:
    """States array (M+1, N, d) written by save_trajectory_binary"""
    with open(path, "rb") as f:
        header = np.fromfile(f, dtype="<i8", count=3)
        if header.size != 3:
            raise ValueError(f"{path} is not a trajectory dump (short header)")
        d, N, M = (int(v) for v in header)
        data = np.fromfile(f, dtype="<f8")
    if data.size != (M + 1) * N * d:
        raise ValueError(f"{path} holds {data.size} values, header promises {(M + 1) * N * d}")
    return data.reshape(M + 1, N, d)
