"""
Large Deviation Experiments
Monte Carlo harness for the small-noise behaviour of the flow:
controlled-vs-skeleton closeness, skeleton continuity under weakly
converging controls, rare-event probabilities against the rate function,
and moment / Lipschitz bounds of the flow.
"""

import csv
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

# Add simulation and optimization directories to path
root_path = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
for sub in ('simulation', 'optimization'):
    sub_path = os.path.join(root_path, sub)
    if sub_path not in sys.path:
        sys.path.insert(0, sub_path)

from coefficients import CoefficientField
from errors import BudgetError
from flow import (ControlPath, NormSpec, Scheme, solve_sde_batch, solve_skeleton,
                  weighted_sup_norm)
from measure import Ensemble, pushforward, wasserstein2
from noise import TimeGrid, sample_noise_batch
from rate_function import RateOptions, TargetSpec, minimize_rate

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MIN_REPLICAS = 30
MIN_MC_SAMPLES = 100
MIN_RELIABLE_ESS = 10.0
DEFAULT_BLOCK_SIZE = 256


# -- parallel replica blocks ----------------------------------------------------------

def replica_blocks(count: int, block_size: int = DEFAULT_BLOCK_SIZE) -> List[range]:
    """Fixed partition of replica indices 0..count-1, independent of the worker count"""
    return [range(start, min(start + block_size, count)) for start in range(0, count, block_size)]


def run_blocks(task: Callable[[range], np.ndarray], count: int, workers: int = 1,
               block_size: int = DEFAULT_BLOCK_SIZE) -> np.ndarray:
    """Apply task to every replica block on a thread pool and concatenate in block order"""
    blocks = replica_blocks(count, block_size)
    if workers <= 1 or len(blocks) == 1:
        parts = [task(block) for block in blocks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(task, blocks))
    return np.concatenate(parts, axis=0)


# -- statistics helpers ----------------------------------------------------------------

def wilson_interval(successes: int, trials: int, confidence: float = 0.95) -> Tuple[float, float]:
    """Wilson score interval for a binomial proportion"""
    if trials < 1:
        raise ValueError(f"Need at least one trial, got {trials}")
    z = stats.norm.ppf(0.5 + confidence / 2.0)
    p = successes / trials
    denom = 1.0 + z * z / trials
    centre = (p + z * z / (2 * trials)) / denom
    half = z * np.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def fit_loglog_slope(x: Sequence[float], y: Sequence[float]) -> Tuple[float, float]:
    """OLS slope of log y against log x with its standard error; nan when undefined"""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = (x > 0) & (y > 0) & np.isfinite(y)
    if keep.sum() < 2:
        return float("nan"), float("nan")
    if keep.sum() == 2:
        lx, ly = np.log(x[keep]), np.log(y[keep])
        return float((ly[1] - ly[0]) / (lx[1] - lx[0])), float("nan")
    fit = stats.linregress(np.log(x[keep]), np.log(y[keep]))
    return float(fit.slope), float(fit.stderr)


# -- configuration and reports ----------------------------------------------------------

@dataclass
class SweepConfig:
    """Settings of an epsilon sweep"""
    epsilons: Sequence[float]
    replicas: int
    seed: int
    norm: NormSpec = field(default_factory=NormSpec)
    budget: float = 10.0
    workers: int = 1
    block_size: int = DEFAULT_BLOCK_SIZE
    slope_band: Tuple[float, float] = (0.4, 0.6)
    track_measures: bool = True

    def __post_init__(self):
        eps = list(self.epsilons)
        if not eps or any(e <= 0 for e in eps):
            raise ValueError(f"Epsilons must be positive, got {eps}")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError(f"Epsilons must be strictly decreasing, got {eps}")
        if self.replicas < MIN_REPLICAS:
            raise ValueError(f"Sweeps need at least {MIN_REPLICAS} replicas, got {self.replicas}")
        if not self.budget > 0:
            raise ValueError(f"Budget N must be positive, got {self.budget}")

    @staticmethod
    def dyadic_epsilons(largest: float, smallest: float) -> List[float]:
        """largest * 2^-k down to the first value not below smallest"""
        out = [largest]
        while out[-1] / 2 >= smallest * (1 - 1e-12):
            out.append(out[-1] / 2)
        return out

    def to_dict(self) -> Dict:
        return {
            "epsilons": list(self.epsilons),
            "replicas": self.replicas,
            "seed": self.seed,
            "norm": self.norm.to_dict(),
            "budget": self.budget,
            "block_size": self.block_size,
            "slope_band": list(self.slope_band),
        }


@dataclass
class LdpReport:
    """Per-row statistics of an experiment with fitted slopes and pass/fail checks"""
    kind: str
    rows: List[Dict] = field(default_factory=list)
    slope: Optional[float] = None
    slope_stderr: Optional[float] = None
    checks: Dict[str, bool] = field(default_factory=dict)
    oracle: Dict = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)
    settings: Dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows], dtype=float)

    def to_dict(self) -> Dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "rows": [{k: _json_number(v) for k, v in row.items()} for row in self.rows],
            "slope": _json_number(self.slope),
            "slope_stderr": _json_number(self.slope_stderr),
            "checks": dict(self.checks),
            "passed": self.passed,
            "oracle": {k: _json_number(v) for k, v in self.oracle.items()},
            "notes": list(self.notes),
            "settings": self.settings,
        }

    def to_csv(self, path: str):
        columns: List[str] = []
        for row in self.rows:
            for key in row:
                if key not in columns:
                    columns.append(key)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["schema_version"] + columns)
            for row in self.rows:
                writer.writerow([SCHEMA_VERSION] + [_csv_value(row.get(c)) for c in columns])


def _json_number(value):
    if isinstance(value, (float, np.floating)):
        return float(value) if np.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


def _csv_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


# -- events -----------------------------------------------------------------------

class EventKind(Enum):
    """Terminal event shapes"""
    HALF_SPACE = "half_space"
    BALL = "ball"
    WHOLE_SPACE = "whole_space"


class EventTarget(Enum):
    """What the event is tested on"""
    POINT = "point"
    MEAN = "mean"


@dataclass(frozen=True, eq=False)
class EventSpec:
    """
    {<normal, Y> >= level} (half space) or {|Y - center| <= radius} (ball)
    for Y the terminal state of a tracked initial point or the terminal mean.
    """
    kind: EventKind
    target: EventTarget = EventTarget.POINT
    x0: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None
    level: float = 0.0
    center: Optional[np.ndarray] = None
    radius: float = 0.0

    def __post_init__(self):
        for name in ("x0", "normal", "center"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, np.atleast_1d(np.asarray(value, dtype=float)))
        if self.kind == EventKind.HALF_SPACE and (self.normal is None or not np.any(self.normal)):
            raise ValueError("Half-space event needs a nonzero normal")
        if self.kind == EventKind.BALL and (self.center is None or self.radius < 0):
            raise ValueError("Ball event needs a center and a nonnegative radius")
        if self.target == EventTarget.POINT and self.x0 is None:
            raise ValueError("Point event needs the tracked initial point x0")

    @classmethod
    def half_space(cls, normal, level: float, x0=None, target: EventTarget = EventTarget.POINT) -> "EventSpec":
        return cls(EventKind.HALF_SPACE, target, x0=x0, normal=normal, level=level)

    @classmethod
    def ball(cls, center, radius: float, x0=None, target: EventTarget = EventTarget.POINT) -> "EventSpec":
        return cls(EventKind.BALL, target, x0=x0, center=center, radius=radius)

    @classmethod
    def whole_space(cls, x0=None, target: EventTarget = EventTarget.POINT) -> "EventSpec":
        return cls(EventKind.WHOLE_SPACE, target, x0=x0)

    def _index(self, init: Ensemble) -> int:
        hits = np.flatnonzero(np.all(np.abs(init.points - self.x0) <= 1e-12, axis=1))
        if hits.size == 0:
            raise ValueError(f"Event point x0={self.x0.tolist()} is not an initial particle")
        return int(hits[0])

    def observable(self, terminal: np.ndarray, init: Ensemble) -> np.ndarray:
        """Y per replica from terminal particle states (R, n, d) -> (R, d)"""
        if self.target == EventTarget.MEAN:
            return np.einsum("n,rnd->rd", init.weights, terminal[:, :init.n])
        return terminal[:, self._index(init)]

    def contains(self, terminal: np.ndarray, init: Ensemble) -> np.ndarray:
        y = self.observable(terminal, init)
        if self.kind == EventKind.WHOLE_SPACE:
            return np.ones(y.shape[0], dtype=bool)
        if self.kind == EventKind.HALF_SPACE:
            return y @ self.normal >= self.level
        return np.linalg.norm(y - self.center, axis=1) <= self.radius

    def closest_point(self, y: np.ndarray) -> np.ndarray:
        """Point of the event nearest to y"""
        if self.kind == EventKind.WHOLE_SPACE:
            return y.copy()
        if self.kind == EventKind.HALF_SPACE:
            excess = self.level - y @ self.normal
            if excess <= 0:
                return y.copy()
            return y + excess * self.normal / (self.normal @ self.normal)
        offset = y - self.center
        dist = np.linalg.norm(offset)
        if dist <= self.radius:
            return y.copy()
        return self.center + self.radius * offset / dist

    def rate_target(self, field: CoefficientField, init: Ensemble, grid: TimeGrid,
                    tolerance: float = 1e-4) -> TargetSpec:
        """Terminal target at the event point closest to the uncontrolled skeleton endpoint"""
        free = solve_skeleton(field, init, ControlPath.zeros(grid, field.modes), grid)
        y = self.observable(free.particle_states[-1][None], init)[0]
        goal = self.closest_point(y)
        if self.target == EventTarget.MEAN:
            return TargetSpec.terminal_mean(goal, tolerance)
        return TargetSpec.terminal_point(self.x0, goal, tolerance)

    def to_dict(self) -> Dict:
        out = {"kind": self.kind.value, "target": self.target.value}
        for name in ("x0", "normal", "center"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value.tolist()
        if self.kind == EventKind.HALF_SPACE:
            out["level"] = self.level
        if self.kind == EventKind.BALL:
            out["radius"] = self.radius
        return out


# -- LDP1: controlled SDE vs skeleton -------------------------------------------------------

def ldp1_sweep(field: CoefficientField, init: Ensemble, control_family: Callable[[float], ControlPath],
               cfg: SweepConfig, eval_points: Optional[np.ndarray] = None) -> LdpReport:
    """
    For every epsilon: ||Y^eps - Z^eps||_{inf,T} over replicas, where Y^eps is the
    controlled SDE and Z^eps the skeleton (Euler consistency mode) under the same
    control. Replica r uses the same noise at every epsilon.
    """
    cfg.norm.check_dimension(init.dim)
    report = LdpReport("ldp1", settings=cfg.to_dict())
    for eps in cfg.epsilons:
        control = control_family(eps)
        if not control.in_budget(cfg.budget):
            raise BudgetError(
                f"Control at epsilon={eps} has integral |h|^2 dt = {control.squared_norm():.6g} > N = {cfg.budget}"
            )
        grid = control.grid
        skeleton = solve_skeleton(field, init, control, grid, eval_points, scheme=Scheme.EULER)
        weight = cfg.norm.weight(skeleton.tracked_points)
        skeleton_measures = [pushforward(init, skeleton.particle_states[j]) for j in range(grid.steps + 1)]

        def block_stats(block: range, eps=eps, control=control, grid=grid,
                        skeleton=skeleton, weight=weight, skeleton_measures=skeleton_measures) -> np.ndarray:
            increments = sample_noise_batch(grid, field.modes, cfg.seed, block)
            paths = solve_sde_batch(field, init, grid, eps, increments, control, eval_points,
                                    replica_offset=block.start)
            diff = np.linalg.norm(paths - skeleton.states[None], axis=3)
            norms = np.max(diff / weight[None, None, :], axis=(1, 2))
            if not cfg.track_measures:
                return np.stack([norms, np.full_like(norms, np.nan)], axis=1)
            measure_dist = np.array([
                max(wasserstein2(pushforward(init, paths[r, j, :init.n]), skeleton_measures[j])
                    for j in range(grid.steps + 1))
                for r in range(paths.shape[0])
            ])
            return np.stack([norms, measure_dist], axis=1)

        values = run_blocks(block_stats, cfg.replicas, cfg.workers, cfg.block_size)
        norms = values[:, 0]
        row = {
            "epsilon": eps,
            "mean_norm": float(np.mean(norms)),
            "q95_norm": float(np.quantile(norms, 0.95)),
            "std_norm": float(np.std(norms, ddof=1)),
            "replicas": cfg.replicas,
        }
        if cfg.track_measures:
            row["mean_measure_distance"] = float(np.mean(values[:, 1]))
        report.rows.append(row)
        logger.info("LDP1 eps=%.3e: mean norm %.6g, q95 %.6g", eps, row["mean_norm"], row["q95_norm"])

    means = report.column("mean_norm")
    eps = np.asarray(cfg.epsilons, dtype=float)
    report.slope, report.slope_stderr = fit_loglog_slope(eps, means)
    if np.all(means == 0):
        report.notes.append("all norms are zero: no noise enters, slope undefined")
    elif np.isfinite(report.slope):
        low, high = cfg.slope_band
        report.checks["slope_in_band"] = bool(low <= report.slope <= high)
        report.checks["means_monotone"] = bool(np.all(np.diff(means) <= 0))
    return report


# -- LDP2: continuity of the skeleton map -------------------------------------------------

def oscillation_family(h: ControlPath, amplitude: float, mode: int = 0) -> Callable[[int], ControlPath]:
    """h_n(t_j) = h(t_j) + amplitude sin(2 pi n t_j) e_mode, weakly convergent to h"""
    times = h.grid.nodes[:-1]

    def family(n: int) -> ControlPath:
        values = np.array(h.values)
        values[:, mode] += amplitude * np.sin(2.0 * np.pi * n * times)
        return ControlPath(values, h.grid)

    return family


def ldp2_sweep(field: CoefficientField, init: Ensemble, h: ControlPath,
               oscillation: Callable[[int], ControlPath], n_list: Sequence[int],
               norm: NormSpec = NormSpec(), tolerance: float = 1e-2,
               eval_points: Optional[np.ndarray] = None) -> LdpReport:
    """weighted_sup_norm(skeleton(h_n), skeleton(h)) along a weakly convergent family"""
    grid = h.grid
    base = solve_skeleton(field, init, h, grid, eval_points)
    report = LdpReport("ldp2", settings={"n_list": list(n_list), "tolerance": tolerance,
                                         "norm": norm.to_dict()})
    for n in n_list:
        perturbed = solve_skeleton(field, init, oscillation(n), grid, eval_points)
        value = weighted_sup_norm(perturbed, base, norm)
        report.rows.append({"n": int(n), "norm": value})
        logger.info("LDP2 n=%d: norm %.6g", n, value)

    norms = report.column("norm")
    if np.all(norms == 0):
        report.notes.append("all norms are zero: the family is constant")
        return report
    tau, p_value = stats.kendalltau(np.asarray(n_list, dtype=float), norms)
    report.oracle["kendall_tau"] = float(tau)
    report.oracle["kendall_p"] = float(p_value)
    report.slope, report.slope_stderr = fit_loglog_slope(n_list, norms)
    report.checks["decreasing_trend"] = bool(tau < 0 and p_value < 0.01)
    report.checks["final_below_tolerance"] = bool(norms[-1] < tolerance)
    return report


# -- rare events --------------------------------------------------------------------

@dataclass
class RareEventEstimate:
    """Probability estimate with confidence interval and effective sample size"""
    p_hat: float
    ci_low: float
    ci_high: float
    ess: float
    n_mc: int
    hits: int
    method: str
    epsilon: float

    @property
    def reliable(self) -> bool:
        return self.ess >= MIN_RELIABLE_ESS

    @property
    def half_width(self) -> float:
        return 0.5 * (self.ci_high - self.ci_low)

    def to_dict(self) -> Dict:
        return {
            "epsilon": self.epsilon,
            "p_hat": self.p_hat,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "ess": self.ess,
            "n_mc": self.n_mc,
            "hits": self.hits,
            "method": self.method,
            "reliable": self.reliable,
        }


def rare_event_probability(field: CoefficientField, init: Ensemble, event: EventSpec, epsilon: float,
                           n_mc: int, seed: int, grid: TimeGrid, tilt: Optional[ControlPath] = None,
                           confidence: float = 0.95, workers: int = 1,
                           block_size: int = 4096) -> RareEventEstimate:
    """
    P(event) under the epsilon-scaled SDE. Without tilt: naive Monte Carlo with a
    Wilson interval. With tilt h: samples are drawn from the SDE controlled by h
    and reweighted by the exact discrete likelihood ratio
    exp(-(1/sqrt eps) sum h_j . dW_j - (1/(2 eps)) sum |h_j|^2 dt).
    """
    if n_mc < MIN_MC_SAMPLES:
        raise ValueError(f"Need at least {MIN_MC_SAMPLES} samples, got {n_mc}")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if tilt is not None and tilt.grid != grid:
        raise ValueError("Tilt control must live on the simulation grid")

    def block_weights(block: range) -> np.ndarray:
        increments = sample_noise_batch(grid, field.modes, seed, block)
        terminal = solve_sde_batch(field, init, grid, epsilon, increments, tilt,
                                   keep_path=False, replica_offset=block.start)
        inside = event.contains(terminal, init).astype(float)
        if tilt is None:
            return inside
        log_lr = (-np.einsum("rmk,mk->r", increments, tilt.values) / np.sqrt(epsilon)
                  - np.sum(tilt.values ** 2) * grid.dt / (2.0 * epsilon))
        return inside * np.exp(log_lr)

    omega = run_blocks(block_weights, n_mc, workers, block_size)
    hits = int(np.count_nonzero(omega))
    total = float(np.sum(omega))
    ess = total ** 2 / float(np.sum(omega ** 2)) if total > 0 else 0.0

    if tilt is None:
        p_hat = hits / n_mc
        low, high = wilson_interval(hits, n_mc, confidence)
        method = "naive"
    else:
        p_hat = total / n_mc
        z = stats.norm.ppf(0.5 + confidence / 2.0)
        half = z * float(np.std(omega, ddof=1)) / np.sqrt(n_mc)
        low, high = max(0.0, p_hat - half), p_hat + half
        method = "importance"

    estimate = RareEventEstimate(p_hat, low, high, ess, n_mc, hits, method, epsilon)
    if not estimate.reliable:
        logger.warning("Unreliable estimate at eps=%.3g: ESS %.1f < %.0f", epsilon, ess, MIN_RELIABLE_ESS)
    return estimate


def scaling_check(field: CoefficientField, init: Ensemble, event: EventSpec, epsilons: Sequence[float],
                  n_mc: int, seed: int, rate_options: RateOptions, use_tilt: bool = True,
                  band: float = 0.15, workers: int = 1) -> LdpReport:
    """
    Table of (eps, p_hat, -eps log p_hat) against I*, the minimal energy of a
    control steering the skeleton to the event's boundary.
    """
    grid = rate_options.grid
    target = event.rate_target(field, init, grid)
    rate = minimize_rate(field, init, target, rate_options)
    report = LdpReport("scaling", settings={"epsilons": list(epsilons), "n_mc": n_mc, "seed": seed,
                                            "band": band, "use_tilt": use_tilt,
                                            "target": target.to_dict()})
    report.oracle["rate"] = rate.energy
    report.oracle["rate_converged"] = rate.converged
    tilt = rate.control if (use_tilt and rate.converged and not rate.control.is_zero()) else None

    for eps in epsilons:
        est = rare_event_probability(field, init, event, eps, n_mc, seed, grid, tilt, workers=workers)
        log_rate = -eps * np.log(est.p_hat) if est.p_hat > 0 else np.inf
        row = est.to_dict()
        row["log_rate"] = float(log_rate)
        row["rate"] = rate.energy
        report.rows.append(row)
        logger.info("Scaling eps=%.3g: p_hat %.4e, -eps log p %.4f (I* = %.4f)", eps, est.p_hat, log_rate, rate.energy)

    log_rates = report.column("log_rate")
    if rate.infeasible:
        unreachable = bool(np.all(report.column("p_hat") == 0))
        report.notes.append("event unreachable: I* is infinite" +
                            ("; every p_hat is 0, consistent" if unreachable else "; but p_hat > 0 was observed"))
        report.checks["consistent_unreachable"] = unreachable
        return report

    report.checks["decreasing"] = bool(np.all(np.isfinite(log_rates)) and np.all(np.diff(log_rates) < 0))
    report.checks["within_band"] = bool(abs(log_rates[-1] - rate.energy) <= band)
    return report


# -- regularity of the flow -------------------------------------------------------------

def _scalar_points(x_list: Sequence[float], dim: int) -> np.ndarray:
    points = np.zeros((len(x_list), dim))
    points[:, 0] = np.asarray(x_list, dtype=float)
    return points


def moment_bounds_check(field: CoefficientField, init: Ensemble, x_list: Sequence[float], p: int,
                        replicas: int, seed: int, grid: TimeGrid, epsilon: float = 1.0,
                        norm: NormSpec = NormSpec(), spread_limit: float = 10.0,
                        workers: int = 1) -> LdpReport:
    """
    E[sup_t |X_t(x)|^p] / (1 + |x|^p) for evaluation points x e_1 carried along
    the flow of init; uniform boundedness shows as max/min <= spread_limit.
    """
    if replicas < MIN_REPLICAS:
        raise ValueError(f"Need at least {MIN_REPLICAS} replicas, got {replicas}")
    if p < 2 or p % 2 or p > norm.m:
        raise ValueError(f"p must be an even integer in [2, m={norm.m}], got {p}")
    points = _scalar_points(x_list, field.dim)

    def block_sup(block: range) -> np.ndarray:
        increments = sample_noise_batch(grid, field.modes, seed, block)
        paths = solve_sde_batch(field, init, grid, epsilon, increments, eval_points=points,
                                replica_offset=block.start)
        return np.max(np.linalg.norm(paths[:, :, init.n:], axis=3) ** p, axis=1)

    sups = run_blocks(block_sup, replicas, workers)
    report = LdpReport("moments", settings={"x": list(x_list), "p": p, "replicas": replicas,
                                            "epsilon": epsilon, "seed": seed})
    ratios = []
    for k, x in enumerate(x_list):
        scale = 1.0 + abs(x) ** p
        ratio = float(np.mean(sups[:, k]) / scale)
        ratios.append(ratio)
        report.rows.append({"x": float(x), "moment": float(np.mean(sups[:, k])), "ratio": ratio})
    ratios = np.asarray(ratios)
    spread = float(ratios.max() / ratios.min()) if ratios.min() > 0 else np.inf
    report.oracle["spread"] = spread
    report.checks["bounded_spread"] = bool(spread <= spread_limit)
    return report


def flow_lipschitz_check(field: CoefficientField, init: Ensemble, x: float, separations: Sequence[float],
                         replicas: int, seed: int, grid: TimeGrid, epsilon: float = 1.0,
                         spread_limit: float = 10.0, workers: int = 1) -> LdpReport:
    """E[sup_t |X_t(x + s) - X_t(x)|^2] / s^2 for several separations s"""
    if replicas < MIN_REPLICAS:
        raise ValueError(f"Need at least {MIN_REPLICAS} replicas, got {replicas}")
    points = _scalar_points([x] + [x + s for s in separations], field.dim)

    def block_sup(block: range) -> np.ndarray:
        increments = sample_noise_batch(grid, field.modes, seed, block)
        paths = solve_sde_batch(field, init, grid, epsilon, increments, eval_points=points,
                                replica_offset=block.start)
        tracked = paths[:, :, init.n:]
        diff = np.linalg.norm(tracked[:, :, 1:] - tracked[:, :, :1], axis=3) ** 2
        return np.max(diff, axis=1)

    sups = run_blocks(block_sup, replicas, workers)
    report = LdpReport("lipschitz", settings={"x": x, "separations": list(separations),
                                              "replicas": replicas, "epsilon": epsilon, "seed": seed})
    ratios = []
    for k, s in enumerate(separations):
        ratio = float(np.mean(sups[:, k]) / s ** 2)
        ratios.append(ratio)
        report.rows.append({"separation": float(s), "ratio": ratio})
    ratios = np.asarray(ratios)
    spread = float(ratios.max() / ratios.min()) if ratios.min() > 0 else np.inf
    report.oracle["spread"] = spread
    report.checks["bounded_spread"] = bool(spread <= spread_limit)
    return report
