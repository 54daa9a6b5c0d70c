"""
Measure Module
Weighted empirical measures on R^d, pushforwards under particle maps,
and the Wasserstein-2 distance between them.
"""

import csv
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from errors import SolverConvergenceError

logger = logging.getLogger(__name__)

WEIGHT_TOLERANCE = 1e-12
ASSIGNMENT_MAX_POINTS = 256

# Entropic solver defaults; reg is relative to the mean transport cost when not given
DEFAULT_RELATIVE_REG = 1e-3
SINKHORN_TOLERANCE = 1e-9
SINKHORN_MAX_ITER = 20000


class DistributionKind(Enum):
    """Initial distribution descriptors understood by ensemble_from_spec"""
    POINT_MASS = "point_mass"
    GRID = "grid"
    GAUSSIAN = "gaussian"
    EXPLICIT = "explicit"


class TransportMethod(Enum):
    """How a Wasserstein-2 value was computed"""
    QUANTILE = "quantile"        # exact, d = 1
    ASSIGNMENT = "assignment"    # exact, equal weights, n <= ASSIGNMENT_MAX_POINTS
    ENTROPIC = "entropic"        # debiased Sinkhorn divergence


@dataclass(frozen=True, eq=False)
class Ensemble:
    """
    Finitely supported probability measure sum_i w_i delta_{x_i} on R^d.

    points may be given as an (n, d) array or, for d = 1, as a flat list of
    scalars. weights default to 1/n each. Arrays are copied and frozen.
    """
    points: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        points = np.array(self.points, dtype=float)
        if points.ndim == 1:
            points = points.reshape(-1, 1)
        if points.ndim != 2 or points.shape[0] < 1 or points.shape[1] < 1:
            raise ValueError(f"Ensemble needs at least one point in R^d, got shape {points.shape}")
        n = points.shape[0]

        if self.weights is None:
            weights = np.full(n, 1.0 / n)
        else:
            weights = np.array(self.weights, dtype=float).reshape(-1)
        if weights.shape != (n,):
            raise ValueError(f"Expected {n} weights, got {weights.shape[0]}")
        if not np.all(np.isfinite(points)):
            raise ValueError("Ensemble points must be finite")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0.0):
            raise ValueError("Ensemble weights must be finite and nonnegative")
        total = float(np.sum(weights))
        if abs(total - 1.0) > WEIGHT_TOLERANCE:
            raise ValueError(f"Ensemble weights sum to {total!r}, not 1")

        points.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def point_mass(cls, x: Sequence[float]) -> "Ensemble":
        """Dirac mass at x"""
        return cls(np.asarray(x, dtype=float).reshape(1, -1), np.ones(1))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def mean(self) -> np.ndarray:
        """Barycenter <id, mu>"""
        return self.weights @ self.points

    def expectation(self, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """<fn, mu> for a function vectorized over rows of an (n, d) array"""
        values = np.asarray(fn(self.points), dtype=float)
        return np.tensordot(self.weights, values, axes=(0, 0))

    def is_equally_weighted(self) -> bool:
        return bool(np.ptp(self.weights) <= 1e-15)

    def coalesce(self) -> "Ensemble":
        """Merge duplicate points, summing their weights"""
        unique, inverse = np.unique(self.points, axis=0, return_inverse=True)
        weights = np.zeros(unique.shape[0])
        np.add.at(weights, inverse.reshape(-1), self.weights)
        return Ensemble(unique, weights)

    def __len__(self) -> int:
        return self.n

    def __str__(self) -> str:
        return f"Ensemble with {self.n} points in R^{self.dim}"


def ensemble_from_spec(spec: Dict, n: int, seed: int = 0) -> Ensemble:
    """
    Build an initial ensemble from a distribution descriptor.

    Args:
        spec: dict with "kind" one of point_mass (x0), grid (low, high),
              gaussian (mean, std) or explicit (points, optional weights)
        n: number of points; for a d-dimensional grid this is the count per axis
        seed: seed for the gaussian kind

    Returns:
        Ensemble, deterministic in (spec, n, seed)
    """
    if n < 1:
        raise ValueError(f"Ensemble size must be at least 1, got {n}")
    try:
        kind = DistributionKind(spec["kind"])
    except (KeyError, ValueError):
        raise ValueError(f"Unknown distribution kind: {spec.get('kind')!r}")

    if kind == DistributionKind.POINT_MASS:
        x0 = np.atleast_1d(np.asarray(spec.get("x0", [0.0]), dtype=float))
        return Ensemble(np.tile(x0, (n, 1)))

    if kind == DistributionKind.GRID:
        low = np.atleast_1d(np.asarray(spec["low"], dtype=float))
        high = np.atleast_1d(np.asarray(spec["high"], dtype=float))
        if low.shape != high.shape:
            raise ValueError("Grid bounds low/high must have the same dimension")
        axes = [np.linspace(lo, hi, n) for lo, hi in zip(low, high)]
        mesh = np.meshgrid(*axes, indexing="ij")
        points = np.stack([m.reshape(-1) for m in mesh], axis=1)
        return Ensemble(points)

    if kind == DistributionKind.GAUSSIAN:
        mean = np.atleast_1d(np.asarray(spec.get("mean", [0.0]), dtype=float))
        std = np.asarray(spec.get("std", 1.0), dtype=float)
        rng = np.random.default_rng(seed)
        points = mean + std * rng.standard_normal((n, mean.shape[0]))
        return Ensemble(points)

    points = np.asarray(spec["points"], dtype=float)
    weights = spec.get("weights")
    return Ensemble(points, None if weights is None else np.asarray(weights, dtype=float))


def pushforward(ens: Ensemble, images: np.ndarray, coalesce: bool = False) -> Ensemble:
    """
    Image measure mu o T^{-1} of an ensemble under a particle map.

    images[i] is T(x_i); weights carry over unchanged, so mass is conserved.
    """
    images = np.asarray(images, dtype=float)
    if images.ndim == 1 and ens.dim == 1:
        images = images.reshape(-1, 1)
    if images.shape != ens.points.shape:
        raise ValueError(
            f"Pushforward images have shape {images.shape}, ensemble has {ens.points.shape}"
        )
    result = Ensemble(images, ens.weights)
    return result.coalesce() if coalesce else result


def second_moment(ens: Ensemble) -> float:
    """sum_i w_i |x_i|^2, which equals W_2(ens, delta_0)^2"""
    return float(ens.weights @ np.sum(ens.points ** 2, axis=1))


class Coupling(NamedTuple):
    """Sparse transport plan: mass[k] moves from source rows[k] to target cols[k]"""
    rows: np.ndarray
    cols: np.ndarray
    mass: np.ndarray


@dataclass
class TransportResult:
    """W_2 value with the method that produced it"""
    value: float
    method: TransportMethod
    reg: Optional[float] = None
    iterations: int = 0
    residual: float = 0.0
    coupling: Optional[Coupling] = None
    source_coupling: Optional[Coupling] = None  # entropic self-coupling of the source

    def to_dict(self) -> Dict:
        return {
            "value": self.value,
            "method": self.method.value,
            "reg": self.reg,
            "iterations": self.iterations,
            "residual": self.residual,
        }


def select_method(a: Ensemble, b: Ensemble) -> TransportMethod:
    """Exact 1-d quantiles, exact assignment when cheap, entropic otherwise"""
    if a.dim == 1:
        return TransportMethod.QUANTILE
    if (a.n == b.n and a.n <= ASSIGNMENT_MAX_POINTS
            and a.is_equally_weighted() and b.is_equally_weighted()):
        return TransportMethod.ASSIGNMENT
    return TransportMethod.ENTROPIC


def _quantile_transport(a: Ensemble, b: Ensemble) -> Tuple[float, Coupling]:
    order_a = np.argsort(a.points[:, 0], kind="stable")
    order_b = np.argsort(b.points[:, 0], kind="stable")
    cum_a = np.cumsum(a.weights[order_a])
    cum_b = np.cumsum(b.weights[order_b])
    cum_a[-1] = 1.0
    cum_b[-1] = 1.0

    upper = np.union1d(cum_a, cum_b)
    lower = np.concatenate(([0.0], upper[:-1]))
    du = upper - lower
    mid = 0.5 * (lower + upper)
    ia = order_a[np.searchsorted(cum_a, mid, side="left")]
    ib = order_b[np.searchsorted(cum_b, mid, side="left")]

    diff = a.points[ia, 0] - b.points[ib, 0]
    squared = float(np.sum(du * diff * diff))
    return squared, Coupling(ia, ib, du)


def _assignment_transport(a: Ensemble, b: Ensemble) -> Tuple[float, Coupling]:
    cost = cdist(a.points, b.points, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    squared = float(np.sum(cost[rows, cols]) / a.n)
    return squared, Coupling(rows, cols, np.full(a.n, 1.0 / a.n))


def _sinkhorn(x: np.ndarray, wx: np.ndarray, y: np.ndarray, wy: np.ndarray,
              reg: float, tol: float, max_iter: int) -> Tuple[float, np.ndarray, int, float]:
    """
    Log-domain Sinkhorn with epsilon scaling.

    Returns (OT_reg value, dense plan, iterations, marginal residual).
    """
    cost = cdist(x, y, "sqeuclidean")
    log_a = np.log(wx)
    log_b = np.log(wy)
    f = np.zeros(x.shape[0])
    g = np.zeros(y.shape[0])

    start = max(float(cost.max()), reg)
    n_stages = max(int(np.ceil(np.log2(start / reg))), 0)
    schedule = [start * 0.5 ** k for k in range(n_stages)] + [reg]

    iterations = 0
    residual = np.inf
    for stage, eps in enumerate(schedule):
        final = stage == len(schedule) - 1
        cap = max_iter if final else 200
        for _ in range(cap):
            f = -eps * logsumexp((g[None, :] - cost) / eps + log_b[None, :], axis=1)
            g = -eps * logsumexp((f[:, None] - cost) / eps + log_a[:, None], axis=0)
            iterations += 1
            log_plan = (f[:, None] + g[None, :] - cost) / eps + log_a[:, None] + log_b[None, :]
            residual = float(np.sum(np.abs(np.exp(logsumexp(log_plan, axis=1)) - wx)))
            if residual < (tol if final else np.sqrt(tol)):
                break
        if final and residual >= tol:
            raise SolverConvergenceError(iterations, residual)

    plan = np.exp((f[:, None] + g[None, :] - cost) / reg + log_a[:, None] + log_b[None, :])
    value = float(wx @ f + wy @ g)
    return value, plan, iterations, residual


def _dense_to_coupling(plan: np.ndarray, rows_index: np.ndarray, cols_index: np.ndarray) -> Coupling:
    rr, cc = np.meshgrid(rows_index, cols_index, indexing="ij")
    return Coupling(rr.reshape(-1), cc.reshape(-1), plan.reshape(-1))


def _entropic_transport(a: Ensemble, b: Ensemble, reg: Optional[float],
                        tol: float, max_iter: int) -> TransportResult:
    keep_a = np.flatnonzero(a.weights > 0)
    keep_b = np.flatnonzero(b.weights > 0)
    xa, wa = a.points[keep_a], a.weights[keep_a]
    xb, wb = b.points[keep_b], b.weights[keep_b]
    if reg is None:
        scale = float(np.mean(cdist(xa, xb, "sqeuclidean")))
        reg = DEFAULT_RELATIVE_REG * scale if scale > 0 else DEFAULT_RELATIVE_REG

    cross, plan_ab, it_ab, res_ab = _sinkhorn(xa, wa, xb, wb, reg, tol, max_iter)
    self_a, plan_aa, it_aa, res_aa = _sinkhorn(xa, wa, xa, wa, reg, tol, max_iter)
    self_b, _, it_bb, res_bb = _sinkhorn(xb, wb, xb, wb, reg, tol, max_iter)
    divergence = cross - 0.5 * self_a - 0.5 * self_b
    logger.debug("Sinkhorn divergence %.6e at reg %.3e (%d iterations)",
                 divergence, reg, it_ab + it_aa + it_bb)

    return TransportResult(
        value=float(np.sqrt(max(divergence, 0.0))),
        method=TransportMethod.ENTROPIC,
        reg=reg,
        iterations=it_ab + it_aa + it_bb,
        residual=max(res_ab, res_aa, res_bb),
        coupling=_dense_to_coupling(plan_ab, keep_a, keep_b),
        source_coupling=_dense_to_coupling(plan_aa, keep_a, keep_a),
    )


def wasserstein2_detailed(a: Ensemble, b: Ensemble, reg: Optional[float] = None,
                          method: Optional[TransportMethod] = None,
                          tol: float = SINKHORN_TOLERANCE,
                          max_iter: int = SINKHORN_MAX_ITER) -> TransportResult:
    """
    W_2(a, b) together with the solver that produced it and its coupling.

    Args:
        reg: entropic regularization (absolute); defaults to a fixed fraction
             of the mean squared distance between the supports
        method: force a solver instead of the automatic tiering
    """
    if a.dim != b.dim:
        raise ValueError(f"Dimension mismatch: {a.dim} vs {b.dim}")
    method = method or select_method(a, b)

    if method == TransportMethod.QUANTILE:
        if a.dim != 1:
            raise ValueError("Quantile coupling is only exact for d = 1")
        squared, coupling = _quantile_transport(a, b)
        return TransportResult(float(np.sqrt(squared)), method, coupling=coupling)
    if method == TransportMethod.ASSIGNMENT:
        if a.n != b.n or not (a.is_equally_weighted() and b.is_equally_weighted()):
            raise ValueError("Assignment solver needs equal sizes and equal weights")
        squared, coupling = _assignment_transport(a, b)
        return TransportResult(float(np.sqrt(squared)), method, coupling=coupling)
    return _entropic_transport(a, b, reg, tol, max_iter)


def wasserstein2(a: Ensemble, b: Ensemble) -> float:
    """Wasserstein-2 distance between two ensembles"""
    return wasserstein2_detailed(a, b).value


def transport_plan(a: Ensemble, b: Ensemble, reg: Optional[float] = None) -> Tuple[np.ndarray, TransportResult]:
    """Dense (n_a, n_b) coupling matrix of the solver chosen for (a, b)"""
    result = wasserstein2_detailed(a, b, reg=reg)
    plan = np.zeros((a.n, b.n))
    rows, cols, mass = result.coupling
    np.add.at(plan, (rows, cols), mass)
    return plan, result


def wasserstein2_gradient(source: Ensemble, target: Ensemble,
                          reg: Optional[float] = None) -> Tuple[float, np.ndarray, TransportResult]:
    """
    Squared distance and its gradient with respect to the source support points.

    For exact solvers the optimal coupling is held fixed (envelope theorem).
    For the entropic solver the squared value is the debiased divergence and
    the gradient includes the source self-transport term.
    """
    result = wasserstein2_detailed(source, target, reg=reg)
    x = source.points
    y = target.points
    grad = np.zeros_like(x)

    rows, cols, mass = result.coupling
    np.add.at(grad, rows, 2.0 * mass[:, None] * (x[rows] - y[cols]))
    if result.method == TransportMethod.ENTROPIC:
        rows, cols, mass = result.source_coupling
        np.add.at(grad, rows, -2.0 * mass[:, None] * (x[rows] - x[cols]))
        squared = result.value ** 2
    else:
        squared = float(np.sum(result.coupling.mass * np.sum(
            (x[result.coupling.rows] - y[result.coupling.cols]) ** 2, axis=1)))
    return squared, grad, result


def load_ensemble_csv(path: str) -> Ensemble:
    """Read an ensemble from CSV with header x_1..x_d,weight"""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty ensemble file")
        header = [h.strip() for h in header]
        expected = [f"x_{k + 1}" for k in range(len(header) - 1)] + ["weight"]
        if header != expected:
            raise ValueError(f"{path}: header must be {','.join(expected)}, got {','.join(header)}")
        rows: List[List[float]] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ValueError(f"{path}:{line_no}: non-numeric entry")
            if len(rows[-1]) != len(header):
                raise ValueError(f"{path}:{line_no}: expected {len(header)} columns")
    if not rows:
        raise ValueError(f"{path}: no points")
    table = np.asarray(rows)
    return Ensemble(table[:, :-1], table[:, -1])


def save_ensemble_csv(ens: Ensemble, path: str):
    """Write an ensemble as CSV with header x_1..x_d,weight"""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow([f"x_{k + 1}" for k in range(ens.dim)] + ["weight"])
        for point, weight in zip(ens.points, ens.weights):
            writer.writerow([repr(float(v)) for v in point] + [repr(float(weight))])
