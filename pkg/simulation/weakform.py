"""
Weak Form Module
Checks that the pushforward measure path of a simulated flow satisfies the
weak formulation of the conservative SPDE driven by the same noise:

    <phi, mu_t> = <phi, mu_0> + int <(eps/2) D^2 phi : A + grad phi . V, mu_s> ds
                  + sqrt(eps) int <grad phi . G, mu_s> dW_s

with every quadrature evaluated at step-start states.
"""

import csv
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import stats

from coefficients import CoefficientField
from errors import ProvenanceError
from flow import FlowTrajectory, solve_sde_batch
from measure import Ensemble
from noise import NoisePath, TimeGrid, sample_noise_batch

logger = logging.getLogger(__name__)

MIN_QV_REPLICAS = 30


# -- test functions ------------------------------------------------------------------

def _smoothstep(u: np.ndarray):
    """S(u) = 10u^3 - 15u^4 + 6u^5 with its first two derivatives"""
    s = u ** 3 * (10.0 - 15.0 * u + 6.0 * u * u)
    ds = 30.0 * u * u * (1.0 - u) ** 2
    d2s = 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u)
    return s, ds, d2s


def _monomial(x: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    return np.prod(x ** alpha, axis=1)


@dataclass(frozen=True, eq=False)
class TestFunction:
    """
    A C^2 compactly supported test function with its gradient and Hessian.
    All three callables act on a batch of points (B, d).
    """
    __test__ = False

    phi: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    support_radius: float
    name: str = "custom"

    @classmethod
    def monomial(cls, alpha: Sequence[int], radius: float, flat_radius: Optional[float] = None,
                 scale: float = 1.0) -> "TestFunction":
        """
        scale * x^alpha * chi(|x|) where chi = 1 on |x| <= flat_radius, 0 on
        |x| >= radius, and a quintic smoothstep in between.
        """
        alpha = np.asarray(alpha, dtype=int)
        if alpha.ndim != 1 or np.any(alpha < 0):
            raise ValueError(f"Monomial exponents must be nonnegative integers, got {alpha}")
        flat = 0.5 * radius if flat_radius is None else float(flat_radius)
        if not (0.0 < flat < radius):
            raise ValueError(f"Need 0 < flat_radius < radius, got {flat} and {radius}")
        width = radius - flat
        d = alpha.size

        def poly_grad(x):
            g = np.zeros_like(x)
            for k in range(d):
                if alpha[k] > 0:
                    lowered = alpha.copy()
                    lowered[k] -= 1
                    g[:, k] = alpha[k] * _monomial(x, lowered)
            return g

        def poly_hess(x):
            h = np.zeros((x.shape[0], d, d))
            for k in range(d):
                for l in range(d):
                    lowered = alpha.copy()
                    lowered[k] -= 1
                    lowered[l] -= 1
                    coef = alpha[k] * (alpha[k] - 1) if k == l else alpha[k] * alpha[l]
                    if coef != 0:
                        h[:, k, l] = coef * _monomial(x, lowered)
            return h

        def cutoff(x):
            r = np.linalg.norm(x, axis=1)
            u = np.clip((r - flat) / width, 0.0, 1.0)
            s, ds, d2s = _smoothstep(u)
            return r, 1.0 - s, -ds / width, -d2s / width ** 2

        def phi(x):
            _, chi, _, _ = cutoff(x)
            return scale * _monomial(x, alpha) * chi

        def grad(x):
            r, chi, dchi, _ = cutoff(x)
            unit = x / np.where(r > 0, r, 1.0)[:, None]
            p = _monomial(x, alpha)
            return scale * (chi[:, None] * poly_grad(x) + (p * dchi)[:, None] * unit)

        def hess(x):
            r, chi, dchi, d2chi = cutoff(x)
            safe_r = np.where(r > 0, r, 1.0)
            unit = x / safe_r[:, None]
            p = _monomial(x, alpha)
            gp = poly_grad(x)
            outer = unit[:, :, None] * unit[:, None, :]
            cross = gp[:, :, None] * unit[:, None, :]
            radial = d2chi[:, None, None] * outer + (dchi / safe_r)[:, None, None] * (np.eye(d) - outer)
            return scale * (chi[:, None, None] * poly_hess(x)
                            + dchi[:, None, None] * (cross + np.swapaxes(cross, 1, 2))
                            + p[:, None, None] * radial)

        label = "x^" + ",".join(str(a) for a in alpha)
        return cls(phi, grad, hess, float(radius), label)

    @classmethod
    def constant(cls, value: float, dim: int, radius: float,
                 flat_radius: Optional[float] = None) -> "TestFunction":
        return cls.monomial(np.zeros(dim, dtype=int), radius, flat_radius, scale=value)

    def check_derivatives(self, points: np.ndarray, step: float = 1e-5) -> float:
        """Largest relative error of grad and hess against central differences"""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        d = points.shape[1]
        g = self.grad(points)
        h = self.hess(points)
        fd_g = np.zeros_like(g)
        fd_h = np.zeros_like(h)
        for k in range(d):
            e = np.zeros(d)
            e[k] = step
            fd_g[:, k] = (self.phi(points + e) - self.phi(points - e)) / (2 * step)
            fd_h[:, :, k] = (self.grad(points + e) - self.grad(points - e)) / (2 * step)
        scale_g = np.maximum(1.0, np.abs(g))
        scale_h = np.maximum(1.0, np.abs(h))
        return float(max(np.max(np.abs(g - fd_g) / scale_g), np.max(np.abs(h - fd_h) / scale_h)))


def default_cutoff_radius(traj: FlowTrajectory) -> float:
    """Twice the largest state norm seen on the trajectory"""
    return max(1.0, 2.0 * float(np.max(np.linalg.norm(traj.states, axis=2))))


# -- residuals -------------------------------------------------------------------

@dataclass
class WeakResidual:
    """Residual path R(t_j), j = 0..M, and its stochastic-integral part"""
    per_step: np.ndarray
    martingale: np.ndarray
    quadratic_variation: float
    independent_qv: float
    grid: TimeGrid

    @property
    def terminal(self) -> float:
        return float(self.per_step[-1])

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.per_step)))

    def to_dict(self) -> Dict:
        return {
            "terminal": self.terminal,
            "max_abs": self.max_abs(),
            "quadratic_variation": self.quadratic_variation,
            "per_step": self.per_step.tolist(),
        }

    def save_csv(self, path: str):
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "time", "residual"])
            for j, (t, r) in enumerate(zip(self.grid.nodes, self.per_step)):
                writer.writerow([j, repr(float(t)), repr(float(r))])


def _residual_batch(states: np.ndarray, n: int, weights: np.ndarray, field: CoefficientField,
                    phi: TestFunction, increments: np.ndarray, epsilon: float, grid: TimeGrid):
    """
    Residual paths for R replicas at once.

    states: (R, M+1, N, d); increments: (R, M, K). Returns
    (residual (R, M+1), martingale (R, M+1), qv (R,), independent qv (R,)).
    """
    R, steps, _, d = states.shape
    M = steps - 1
    K = field.modes
    dt = grid.dt
    nodes = grid.nodes
    sqrt_eps = np.sqrt(epsilon)

    level = np.empty((R, M + 1))
    drift = np.empty((R, M))
    noise_vec = np.empty((R, M, K))
    own_sq = np.empty((R, M))

    for j in range(M + 1):
        x = states[:, j, :n]
        flat = x.reshape(R * n, d)
        level[:, j] = phi.phi(flat).reshape(R, n) @ weights
        if j == M:
            break
        s = np.repeat(field.statistics(x, weights), n, axis=0)
        v = field.drift_at(nodes[j], flat, s)
        g = field.diffusion_at(nodes[j], flat, s)
        grad = phi.grad(flat)
        hess = phi.hess(flat)
        generator = np.sum(grad * v, axis=1) + 0.5 * epsilon * np.einsum("bij,bjk,bik->b", hess, g, g)
        drift[:, j] = generator.reshape(R, n) @ weights
        grad_g = np.einsum("bd,bdk->bk", grad, g).reshape(R, n, K)
        noise_vec[:, j] = np.einsum("n,rnk->rk", weights, grad_g)
        own_sq[:, j] = np.sum(grad_g ** 2, axis=2) @ (weights ** 2)

    martingale = np.zeros((R, M + 1))
    martingale[:, 1:] = sqrt_eps * np.cumsum(np.sum(noise_vec * increments, axis=2), axis=1)
    compensator = np.zeros((R, M + 1))
    compensator[:, 1:] = np.cumsum(drift * dt, axis=1)
    residual = (level - level[:, :1]) - compensator - martingale
    qv = epsilon * np.sum(noise_vec ** 2, axis=(1, 2)) * dt
    independent = epsilon * np.sum(own_sq, axis=1) * dt
    return residual, martingale, qv, independent


def _check_provenance(traj: FlowTrajectory, noise: NoisePath, epsilon: float):
    if traj.grid != noise.grid:
        raise ProvenanceError(f"Noise grid {noise.grid} differs from trajectory grid {traj.grid}")
    if traj.seed != noise.seed or traj.replica != noise.replica:
        raise ProvenanceError(
            f"Trajectory was driven by (seed={traj.seed}, replica={traj.replica}), "
            f"noise is (seed={noise.seed}, replica={noise.replica})"
        )
    if traj.epsilon is None or traj.epsilon != epsilon:
        raise ProvenanceError(f"Trajectory was simulated with epsilon={traj.epsilon}, not {epsilon}")


def weak_residual(traj: FlowTrajectory, field: CoefficientField, phi: TestFunction,
                  noise: NoisePath, epsilon: float) -> WeakResidual:
    """Weak-form residual R(t_j) of a solve_sde trajectory against its own noise"""
    _check_provenance(traj, noise, epsilon)
    residual, martingale, qv, independent = _residual_batch(
        traj.states[None], traj.n, traj.initial.weights, field, phi,
        noise.increments[None], epsilon, traj.grid,
    )
    return WeakResidual(residual[0], martingale[0], float(qv[0]), float(independent[0]), traj.grid)


# -- quadratic variation -----------------------------------------------------------

@dataclass
class QuadraticVariationReport:
    """Martingale second moment against the common and independent noise predictions"""
    empirical_qv: float
    predicted_qv: float
    z_score: float
    independent_qv: float
    independent_z: float
    replicas: int

    def passed(self, z_limit: float = 3.0) -> bool:
        return abs(self.z_score) <= z_limit

    def to_dict(self) -> Dict:
        return {
            "empirical_qv": self.empirical_qv,
            "predicted_qv": self.predicted_qv,
            "z_score": self.z_score,
            "independent_qv": self.independent_qv,
            "independent_z": self.independent_z,
            "replicas": self.replicas,
        }


def _paired_z(samples: np.ndarray) -> float:
    mean = float(np.mean(samples))
    spread = float(np.std(samples, ddof=1))
    if spread == 0.0:
        return 0.0 if mean == 0.0 else float(np.sign(mean) * np.inf)
    return mean / (spread / np.sqrt(samples.size))


def quadratic_variation_check(traj: FlowTrajectory, field: CoefficientField, phi: TestFunction,
                              epsilon: float, replicas: int, seed: int) -> QuadraticVariationReport:
    """
    Re-simulate the flow of traj under `replicas` fresh noise paths and compare
    E[M_T^2] of the stochastic-integral term with
    eps * int |sum_i w_i grad phi(X_i) G(X_i)|^2 dt (one common noise) and
    with eps * int sum_i w_i^2 |grad phi(X_i) G(X_i)|^2 dt (independent noise).
    """
    if replicas < MIN_QV_REPLICAS:
        raise ValueError(f"quadratic_variation_check needs at least {MIN_QV_REPLICAS} replicas, got {replicas}")
    grid = traj.grid
    increments = sample_noise_batch(grid, field.modes, seed, range(replicas))
    states = solve_sde_batch(field, traj.initial, grid, epsilon, increments)
    _, martingale, qv, independent = _residual_batch(
        states, traj.n, traj.initial.weights, field, phi, increments, epsilon, grid,
    )
    terminal_sq = martingale[:, -1] ** 2
    report = QuadraticVariationReport(
        empirical_qv=float(np.mean(terminal_sq)),
        predicted_qv=float(np.mean(qv)),
        z_score=_paired_z(terminal_sq - qv),
        independent_qv=float(np.mean(independent)),
        independent_z=_paired_z(terminal_sq - independent),
        replicas=replicas,
    )
    logger.info("QV check: empirical %.6g, common-noise %.6g (z=%.2f), independent %.6g (z=%.2f)",
                report.empirical_qv, report.predicted_qv, report.z_score,
                report.independent_qv, report.independent_z)
    return report


# -- refinement ----------------------------------------------------------------------

@dataclass
class RefinementReport:
    """mean_r max_t R(t)^2 on dyadic grids sharing one Brownian path per replica"""
    steps: List[int]
    dt: List[float]
    mean_max_sq: List[float]
    order: float
    order_stderr: float

    def to_dict(self) -> Dict:
        return {
            "steps": self.steps,
            "dt": self.dt,
            "mean_max_sq": self.mean_max_sq,
            "order": self.order,
            "order_stderr": self.order_stderr,
        }


def terminal_residuals(field: CoefficientField, init: Ensemble, phi: TestFunction, epsilon: float,
                       grid: TimeGrid, replicas: int, seed: int) -> np.ndarray:
    """Terminal residual R(T) of `replicas` independent runs"""
    increments = sample_noise_batch(grid, field.modes, seed, range(replicas))
    states = solve_sde_batch(field, init, grid, epsilon, increments)
    residual, _, _, _ = _residual_batch(states, init.n, init.weights, field, phi, increments, epsilon, grid)
    return residual[:, -1]


def weak_residual_refinement(field: CoefficientField, init: Ensemble, phi: TestFunction,
                             epsilon: float, grid: TimeGrid, levels: int, replicas: int,
                             seed: int) -> RefinementReport:
    """
    Residual size on grid, grid.refine(2), ... (levels grids in total). Coarse
    noise is the fine noise summed over blocks, so all levels see the same
    Brownian path. The fitted order is the slope of log mean max R^2 in log dt.
    """
    if levels < 2:
        raise ValueError(f"Need at least two refinement levels, got {levels}")
    fine = grid.refine(2 ** (levels - 1))
    fine_increments = sample_noise_batch(fine, field.modes, seed, range(replicas))

    steps, dts, sizes = [], [], []
    for level in range(levels):
        factor = 2 ** (levels - 1 - level)
        current = TimeGrid(grid.horizon, grid.steps * 2 ** level)
        increments = fine_increments.reshape(replicas, current.steps, factor, field.modes).sum(axis=2)
        states = solve_sde_batch(field, init, current, epsilon, increments)
        residual, _, _, _ = _residual_batch(states, init.n, init.weights, field, phi,
                                             increments, epsilon, current)
        steps.append(current.steps)
        dts.append(current.dt)
        sizes.append(float(np.mean(np.max(residual ** 2, axis=1))))
        logger.debug("refinement level M=%d: mean max R^2 = %.6g", current.steps, sizes[-1])

    if min(sizes) <= 0.0:
        return RefinementReport(steps, dts, sizes, float("nan"), float("nan"))
    fit = stats.linregress(np.log(dts), np.log(sizes))
    return RefinementReport(steps, dts, sizes, float(fit.slope), float(fit.stderr))
