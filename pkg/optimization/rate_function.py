"""
Rate Function Optimization
Control energy 1/2 int |h|^2 dt and its minimization over controls steering
the skeleton equation to a terminal target (a tracked point, the mean, or a
whole measure). Gradients come from the discrete adjoint of the skeleton
steps, including the coupling through the empirical measure.
"""

import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

# Add simulation directory to path
sim_path = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'simulation')
if sim_path not in sys.path:
    sys.path.insert(0, sim_path)

from coefficients import CoefficientField
from errors import SimulationError
from flow import ControlPath, Scheme, integrate
from measure import Ensemble, pushforward, wasserstein2_gradient
from noise import TimeGrid

logger = logging.getLogger(__name__)

DEFAULT_PENALTY_SCHEDULE = (1e1, 1e2, 1e3, 1e4, 1e5, 1e6, 1e7, 1e8)
DEFAULT_TOLERANCE = 1e-4
STAGNATION_ORDERS = 6
STAGNATION_RATIO = 0.1
MAX_HALVINGS = 60
POINT_MATCH_TOLERANCE = 1e-12


class TargetKind(Enum):
    """Terminal-time functional the skeleton is steered to"""
    TERMINAL_POINT = "terminal_point"
    TERMINAL_MEAN = "terminal_mean"
    TERMINAL_MEASURE = "terminal_measure"


@dataclass(frozen=True, eq=False)
class TargetSpec:
    """Level-set constraint at the horizon with its acceptance tolerance"""
    kind: TargetKind
    value: Optional[np.ndarray] = None
    x0: Optional[np.ndarray] = None
    goal: Optional[Ensemble] = None
    tolerance: float = DEFAULT_TOLERANCE

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError(f"Target tolerance must be positive, got {self.tolerance}")
        if self.kind == TargetKind.TERMINAL_MEASURE:
            if self.goal is None:
                raise ValueError("terminal_measure target needs a goal ensemble")
        else:
            if self.value is None:
                raise ValueError(f"{self.kind.value} target needs a value")
            object.__setattr__(self, "value", np.atleast_1d(np.asarray(self.value, dtype=float)))
        if self.kind == TargetKind.TERMINAL_POINT:
            if self.x0 is None:
                raise ValueError("terminal_point target needs the tracked initial point x0")
            object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))

    @classmethod
    def terminal_point(cls, x0, a, tolerance: float = DEFAULT_TOLERANCE) -> "TargetSpec":
        return cls(TargetKind.TERMINAL_POINT, value=a, x0=x0, tolerance=tolerance)

    @classmethod
    def terminal_mean(cls, a, tolerance: float = DEFAULT_TOLERANCE) -> "TargetSpec":
        return cls(TargetKind.TERMINAL_MEAN, value=a, tolerance=tolerance)

    @classmethod
    def terminal_measure(cls, goal: Ensemble, tolerance: float = DEFAULT_TOLERANCE) -> "TargetSpec":
        return cls(TargetKind.TERMINAL_MEASURE, goal=goal, tolerance=tolerance)

    @property
    def dim(self) -> int:
        return self.goal.dim if self.kind == TargetKind.TERMINAL_MEASURE else self.value.size

    def point_index(self, init: Ensemble) -> Optional[int]:
        """Index of x0 among the initial particles"""
        if self.kind != TargetKind.TERMINAL_POINT:
            return None
        hits = np.flatnonzero(np.all(np.abs(init.points - self.x0) <= POINT_MATCH_TOLERANCE, axis=1))
        if hits.size == 0:
            raise ValueError(f"Target point x0={self.x0.tolist()} is not an initial particle")
        return int(hits[0])

    def gap(self, terminal: np.ndarray, init: Ensemble) -> Tuple[float, np.ndarray]:
        """Constraint gap at the horizon and the gradient of gap^2 in the particle states"""
        grad = np.zeros_like(terminal)
        if self.kind == TargetKind.TERMINAL_POINT:
            i = self.point_index(init)
            diff = terminal[i] - self.value
            grad[i] = 2.0 * diff
            return float(np.linalg.norm(diff)), grad
        if self.kind == TargetKind.TERMINAL_MEAN:
            diff = init.weights @ terminal - self.value
            grad[:] = 2.0 * init.weights[:, None] * diff[None, :]
            return float(np.linalg.norm(diff)), grad
        squared, grad, _ = wasserstein2_gradient(pushforward(init, terminal), self.goal)
        return float(np.sqrt(max(squared, 0.0))), grad

    def to_dict(self) -> Dict:
        out = {"kind": self.kind.value, "tolerance": self.tolerance}
        if self.value is not None:
            out["value"] = self.value.tolist()
        if self.x0 is not None:
            out["x0"] = self.x0.tolist()
        if self.goal is not None:
            out["goal_points"] = self.goal.n
        return out


@dataclass
class RateOptions:
    """Settings of the penalty continuation"""
    grid: TimeGrid
    max_iter: int = 200
    penalty_schedule: Sequence[float] = DEFAULT_PENALTY_SCHEDULE
    scheme: Scheme = Scheme.HEUN
    energy_rtol: float = 1e-8
    sufficient_decrease: float = 1e-4
    multistart: int = 0
    multistart_scale: float = 1.0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be at least 1, got {self.max_iter}")
        schedule = list(self.penalty_schedule)
        if not schedule or any(p <= 0 for p in schedule) or any(b <= a for a, b in zip(schedule, schedule[1:])):
            raise ValueError(f"Penalty schedule must be positive and increasing, got {schedule}")

    def to_dict(self) -> Dict:
        return {
            "horizon": self.grid.horizon,
            "steps": self.grid.steps,
            "max_iter": self.max_iter,
            "penalty_schedule": list(self.penalty_schedule),
            "scheme": self.scheme.value,
            "energy_rtol": self.energy_rtol,
            "sufficient_decrease": self.sufficient_decrease,
            "multistart": self.multistart,
            "seed": self.seed,
        }


@dataclass
class RateEstimate:
    """Result of a rate-function minimization"""
    energy: float
    control: ControlPath
    constraint_gap: float
    converged: bool
    iterations: int
    infeasible: bool = False
    stage_gaps: List[float] = field(default_factory=list)
    penalty_weight: float = 0.0

    def to_dict(self, include_control: bool = False) -> Dict:
        out = {
            "energy": self.energy if np.isfinite(self.energy) else None,
            "converged": self.converged,
            "infeasible": self.infeasible,
            "iterations": self.iterations,
            "constraint_gap": self.constraint_gap,
            "penalty_weight": self.penalty_weight,
            "stage_gaps": list(self.stage_gaps),
            "control_energy": energy(self.control),
        }
        if include_control:
            out["control"] = self.control.values.tolist()
        return out

    def __str__(self) -> str:
        state = "infeasible" if self.infeasible else ("converged" if self.converged else "not converged")
        return f"RateEstimate(energy={self.energy:.6g}, gap={self.constraint_gap:.3e}, {state})"


def energy(control: ControlPath) -> float:
    """1/2 sum_j |h_j|^2 dt"""
    return 0.5 * control.squared_norm()


# -- forward and adjoint -----------------------------------------------------------

def _check_inputs(field: CoefficientField, init: Ensemble, grid: TimeGrid, target: TargetSpec):
    if field.dim != init.dim:
        raise ValueError(f"{field} cannot act on an ensemble in R^{init.dim}")
    if target.dim != init.dim:
        raise ValueError(f"Target lives in R^{target.dim}, ensemble in R^{init.dim}")
    target.point_index(init)


def _forward(field: CoefficientField, init: Ensemble, values: np.ndarray, grid: TimeGrid,
             scheme: Scheme) -> np.ndarray:
    """Skeleton particle states (M+1, n, d)"""
    return integrate(field, init.points[None], init.weights, init.n, grid,
                     control=values, scheme=scheme)[0]


def _stage_jacobian(field: CoefficientField, t: float, x: np.ndarray, s: np.ndarray, h: np.ndarray):
    """G and the x- and s-Jacobians of V + G h at a batch of points"""
    dv_dx, dv_ds, dg_dx, dg_ds = field.jacobians(t, x, s)
    g = field.diffusion_at(t, x, s)
    jx = dv_dx + np.einsum("bdkl,k->bdl", dg_dx, h)
    js = dv_ds + np.einsum("bdkq,k->bdq", dg_ds, h)
    return g, jx, js


def _adjoint(field: CoefficientField, init: Ensemble, values: np.ndarray, grid: TimeGrid,
             states: np.ndarray, terminal: np.ndarray, scheme: Scheme) -> np.ndarray:
    """
    Reverse sweep through the skeleton steps.

    terminal is dL/dX_M of shape (n, d); returns dL/dh of shape (M, K). The
    statistic s_j of the step-start measure feeds both Heun stages, and its
    sensitivity is pushed back to every particle through d phi / dx.
    """
    n = init.n
    w = init.weights
    dt = grid.dt
    nodes = grid.nodes
    q = field.statistic.size
    out = np.zeros_like(values)
    lam = terminal.copy()

    for j in reversed(range(grid.steps)):
        x = states[j]
        h = values[j]
        s = np.tile(field.statistics(x[None], w)[0], (n, 1))
        g1, j1x, j1s = _stage_jacobian(field, nodes[j], x, s, h)

        if scheme is Scheme.HEUN:
            k1 = field.drift_at(nodes[j], x, s) + g1 @ h
            predicted = x + dt * k1
            g2, j2x, j2s = _stage_jacobian(field, nodes[j + 1], predicted, s, h)
            a2 = 0.5 * dt * lam
            lam_p = np.einsum("bdl,bd->bl", j2x, a2)
            a1 = 0.5 * dt * lam + dt * lam_p
            lam_s = np.einsum("bdq,bd->q", j1s, a1) + np.einsum("bdq,bd->q", j2s, a2)
            out[j] = np.einsum("bdk,bd->k", g1, a1) + np.einsum("bdk,bd->k", g2, a2)
            nxt = lam + lam_p + np.einsum("bdl,bd->bl", j1x, a1)
        else:
            a1 = dt * lam
            lam_s = np.einsum("bdq,bd->q", j1s, a1)
            out[j] = np.einsum("bdk,bd->k", g1, a1)
            nxt = lam + np.einsum("bdl,bd->bl", j1x, a1)

        if q > 0:
            dphi = field.statistic.jacobian(x)
            nxt = nxt + w[:, None] * np.einsum("bqd,q->bd", dphi, lam_s)
        lam = nxt
        if not np.all(np.isfinite(lam)):
            raise SimulationError(f"Non-finite adjoint state at step {j}")

    return out


def control_gradient(field: CoefficientField, init: Ensemble, control: ControlPath, target: TargetSpec,
                     penalty_weight: float, scheme: Scheme = Scheme.HEUN) -> np.ndarray:
    """Gradient of energy(h) + penalty_weight * gap(h)^2 in the discrete control values"""
    grid = control.grid
    grad = control.values * grid.dt
    if penalty_weight == 0:
        return grad
    _check_inputs(field, init, grid, target)
    states = _forward(field, init, control.values, grid, scheme)
    _, dgap = target.gap(states[-1], init)
    return grad + _adjoint(field, init, control.values, grid, states, penalty_weight * dgap, scheme)


def penalized_objective(field: CoefficientField, init: Ensemble, control: ControlPath, target: TargetSpec,
                        penalty_weight: float, scheme: Scheme = Scheme.HEUN) -> float:
    """energy(h) + penalty_weight * gap(h)^2"""
    states = _forward(field, init, control.values, control.grid, scheme)
    gap, _ = target.gap(states[-1], init)
    return energy(control) + penalty_weight * gap ** 2


# -- penalty continuation ------------------------------------------------------------

class RateOptimizer:
    """Quadratic-penalty continuation with Barzilai-Borwein gradient steps"""

    def __init__(self, field: CoefficientField, init: Ensemble, target: TargetSpec, options: RateOptions):
        _check_inputs(field, init, options.grid, target)
        self.field = field
        self.init = init
        self.target = target
        self.options = options
        self.grid = options.grid

    def evaluate(self, values: np.ndarray, rho: float) -> Tuple[float, float, float]:
        """(objective, energy, gap) for control values"""
        states = _forward(self.field, self.init, values, self.grid, self.options.scheme)
        gap, _ = self.target.gap(states[-1], self.init)
        e = 0.5 * float(np.sum(values ** 2)) * self.grid.dt
        return e + rho * gap ** 2, e, gap

    def gradient(self, values: np.ndarray, rho: float) -> np.ndarray:
        states = _forward(self.field, self.init, values, self.grid, self.options.scheme)
        _, dgap = self.target.gap(states[-1], self.init)
        adj = _adjoint(self.field, self.init, values, self.grid, states, rho * dgap, self.options.scheme)
        return values * self.grid.dt + adj

    def _safe_objective(self, values: np.ndarray, rho: float) -> float:
        try:
            return self.evaluate(values, rho)[0]
        except SimulationError:
            return np.inf

    def descend(self, values: np.ndarray, rho: float) -> Tuple[np.ndarray, int]:
        """Gradient descent on one penalty stage; returns (values, iterations)"""
        dt = self.grid.dt
        c = self.options.sufficient_decrease
        phi = self.evaluate(values, rho)[0]
        grad = self.gradient(values, rho)
        step = 1.0

        for iteration in range(1, self.options.max_iter + 1):
            direction = -grad / dt
            slope = float(np.sum(grad * direction))
            if slope == 0.0:
                return values, iteration - 1

            alpha = step
            for _ in range(MAX_HALVINGS):
                trial = values + alpha * direction
                phi_trial = self._safe_objective(trial, rho)
                if phi_trial <= phi + c * alpha * slope:
                    break
                alpha *= 0.5
            else:
                logger.debug("Line search stalled at penalty %.1e after %d iterations", rho, iteration)
                return values, iteration

            grad_trial = self.gradient(trial, rho)
            s = trial - values
            sy = float(np.sum(s * (grad_trial - grad))) / dt
            step = float(np.sum(s * s)) / sy if sy > 0 else 1.0

            change = abs(phi - phi_trial)
            values, phi, grad = trial, phi_trial, grad_trial
            if change <= self.options.energy_rtol * max(abs(phi), np.finfo(float).tiny):
                return values, iteration

        return values, self.options.max_iter

    def _stagnated(self, penalties: List[float], gaps: List[float]) -> bool:
        """Gap has not dropped while the penalty grew by STAGNATION_ORDERS decades"""
        k = len(gaps) - 1
        for i in range(k):
            if penalties[k] / penalties[i] >= 10.0 ** STAGNATION_ORDERS and gaps[k] > STAGNATION_RATIO * gaps[i]:
                return True
        return False

    def run(self, start: Optional[np.ndarray] = None) -> RateEstimate:
        values = np.zeros((self.grid.steps, self.field.modes)) if start is None else np.array(start, dtype=float)
        schedule = list(self.options.penalty_schedule)
        tolerance = self.target.tolerance
        stage_gaps: List[float] = []
        total = 0
        rho = schedule[0]
        converged = infeasible = False

        for k, rho in enumerate(schedule):
            values, iterations = self.descend(values, rho)
            total += iterations
            _, e, gap = self.evaluate(values, rho)
            stage_gaps.append(gap)
            logger.info("Penalty %.1e: energy %.8g, gap %.3e (%d iterations)", rho, e, gap, iterations)
            if gap <= tolerance:
                converged = True
                break
            if self._stagnated(schedule[:k + 1], stage_gaps):
                infeasible = True
                break

        control = ControlPath(values, self.grid)
        e = energy(control)
        if infeasible:
            logger.warning("Target %s looks unreachable: gap stuck at %.3e", self.target.kind.value, stage_gaps[-1])
            e = np.inf
        elif not converged:
            logger.warning("Rate minimization stopped with gap %.3e > tolerance %.1e", stage_gaps[-1], tolerance)
        return RateEstimate(e, control, stage_gaps[-1], converged, total, infeasible, stage_gaps, rho)


def _better(a: RateEstimate, b: RateEstimate) -> bool:
    if a.converged != b.converged:
        return a.converged
    if a.converged:
        return a.energy < b.energy
    return a.constraint_gap < b.constraint_gap


def minimize_rate(field: CoefficientField, init: Ensemble, target: TargetSpec, options: RateOptions) -> RateEstimate:
    """
    Approximate inf { 1/2 int |h|^2 dt : skeleton(h) meets target } from above.

    Starts from h = 0, plus options.multistart random starts run in parallel;
    the best converged estimate (lowest energy) wins.
    """
    optimizer = RateOptimizer(field, init, target, options)
    starts: List[Optional[np.ndarray]] = [None]
    for k in range(options.multistart):
        rng = np.random.default_rng([options.seed, k])
        starts.append(options.multistart_scale * rng.standard_normal((options.grid.steps, field.modes)))

    if len(starts) == 1:
        return optimizer.run()
    with ThreadPoolExecutor(max_workers=max(1, options.workers)) as pool:
        results = list(pool.map(optimizer.run, starts))
    best = results[0]
    for result in results[1:]:
        if _better(result, best):
            best = result
    return best


def rate_for_measure_target(field: CoefficientField, init: Ensemble, goal: Ensemble, options: RateOptions,
                            tolerance: float = DEFAULT_TOLERANCE) -> RateEstimate:
    """Rate of reaching the terminal measure goal, gap = W_2(mu^h_T, goal)"""
    if goal.dim != init.dim:
        raise ValueError(f"Goal lives in R^{goal.dim}, ensemble in R^{init.dim}")
    return minimize_rate(field, init, TargetSpec.terminal_measure(goal, tolerance), options)


# -- brute-force cross-check ------------------------------------------------------------

@dataclass
class ScanResult:
    """Cheapest control found by scanning an affine-in-time family"""
    energy: float
    control: Optional[ControlPath]
    constraint_gap: float
    feasible: bool
    candidates: int

    def to_dict(self) -> Dict:
        return {
            "energy": self.energy if np.isfinite(self.energy) else None,
            "constraint_gap": self.constraint_gap,
            "feasible": self.feasible,
            "candidates": self.candidates,
        }


def constant_control_scan(field: CoefficientField, init: Ensemble, target: TargetSpec, grid: TimeGrid,
                          values: Sequence[float], slopes: Sequence[float] = (0.0,), mode: int = 0,
                          tolerance: Optional[float] = None, scheme: Scheme = Scheme.HEUN) -> ScanResult:
    """
    Try h(t) = (c0 + c1 t) e_mode for every c0 in values and c1 in slopes;
    return the lowest-energy candidate whose gap is within tolerance, or the
    smallest-gap candidate when none is.
    """
    _check_inputs(field, init, grid, target)
    tolerance = target.tolerance if tolerance is None else tolerance
    times = grid.nodes[:-1]
    best_feasible: Optional[Tuple[float, float, np.ndarray]] = None
    best_gap: Optional[Tuple[float, float, np.ndarray]] = None
    count = 0

    for c1 in slopes:
        for c0 in values:
            h = np.zeros((grid.steps, field.modes))
            h[:, mode] = c0 + c1 * times
            states = _forward(field, init, h, grid, scheme)
            gap, _ = target.gap(states[-1], init)
            e = 0.5 * float(np.sum(h ** 2)) * grid.dt
            count += 1
            if gap <= tolerance and (best_feasible is None or e < best_feasible[0]):
                best_feasible = (e, gap, h)
            if best_gap is None or gap < best_gap[1]:
                best_gap = (e, gap, h)

    if best_feasible is not None:
        e, gap, h = best_feasible
        return ScanResult(e, ControlPath(h, grid), gap, True, count)
    if best_gap is None:
        return ScanResult(np.inf, None, np.inf, False, 0)
    e, gap, h = best_gap
    return ScanResult(np.inf, ControlPath(h, grid), gap, False, count)
