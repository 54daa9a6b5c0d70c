"""
Coefficients Module
Measure-dependent drift V(t, x, mu) and diffusion G(t, x, mu) with K noise
modes, the diffusion matrix A = G G^T, and empirical Lipschitz probes.

A field sees the measure only through a declared statistic
s(mu) = sum_i w_i phi(x_i). Internally every function is vectorized over a
batch of B points: x has shape (B, d) and s has shape (B, q), one statistic
row per point.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from measure import Ensemble, second_moment, wasserstein2

logger = logging.getLogger(__name__)

ArrayFn = Callable[[float, np.ndarray, np.ndarray], np.ndarray]
JacobianFn = Callable[[float, np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]

FD_STEP = 1e-6


@dataclass(frozen=True, eq=False)
class Statistic:
    """phi: R^d -> R^q whose weighted average is all a field sees of mu"""
    name: str
    size: int
    fn: Callable[[np.ndarray], np.ndarray]
    jac: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """d phi / dx, shape (B, q, d)"""
        if self.jac is not None:
            return self.jac(x)
        return _central_difference(lambda y: self.fn(y), x)


def _no_statistic() -> Statistic:
    return Statistic("none", 0,
                     lambda x: np.zeros((x.shape[0], 0)),
                     lambda x: np.zeros((x.shape[0], 0, x.shape[1])))


def mean_statistic(dim: int) -> Statistic:
    return Statistic("mean", dim,
                     lambda x: x.copy(),
                     lambda x: np.broadcast_to(np.eye(dim), (x.shape[0], dim, dim)).copy())


def second_moment_statistic() -> Statistic:
    return Statistic("second_moment", 1,
                     lambda x: np.sum(x * x, axis=1, keepdims=True),
                     lambda x: 2.0 * x[:, None, :])


def circular_statistic() -> Statistic:
    """(<cos, mu>, <sin, mu>) for scalar states"""
    return Statistic("circular", 2,
                     lambda x: np.concatenate([np.cos(x), np.sin(x)], axis=1),
                     lambda x: np.stack([-np.sin(x), np.cos(x)], axis=1))


def _central_difference(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    """Row-wise Jacobian of a batched map, shape (B, *out, d)"""
    base = fn(x)
    d = x.shape[1]
    jac = np.zeros(base.shape + (d,))
    for k in range(d):
        h = FD_STEP * np.maximum(1.0, np.abs(x[:, k]))
        shift = np.zeros_like(x)
        shift[:, k] = h
        diff = fn(x + shift) - fn(x - shift)
        jac[..., k] = diff / (2.0 * h.reshape((-1,) + (1,) * (diff.ndim - 1)))
    return jac


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """
    The coefficient pair (V, G) of an SDE with interaction.

    drift_fn(t, x, s) -> (B, d); diffusion_fn(t, x, s) -> (B, d, K).
    Optional analytic Jacobians return (dV/dx (B,d,d), dV/ds (B,d,q)) and
    (dG/dx (B,d,K,d), dG/ds (B,d,K,q)); missing ones fall back to central
    differences.
    """
    name: str
    dim: int
    modes: int
    drift_fn: ArrayFn
    diffusion_fn: ArrayFn
    statistic: Statistic = field(default_factory=_no_statistic)
    lipschitz_hint: Optional[float] = None
    drift_jac: Optional[JacobianFn] = None
    diffusion_jac: Optional[JacobianFn] = None
    params: Dict = field(default_factory=dict)

    # -- statistics --------------------------------------------------------

    def statistics(self, points: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """s = sum_i w_i phi(x_i) for a batch of ensembles.

        points has shape (R, n, d); returns (R, q).
        """
        R, n, d = points.shape
        phi = self.statistic.fn(points.reshape(R * n, d)).reshape(R, n, self.statistic.size)
        return np.einsum("n,rnq->rq", weights, phi)

    def measure_statistic(self, mu: Ensemble) -> np.ndarray:
        return self.statistics(mu.points[None], mu.weights)[0]

    # -- evaluation ----------------------------------------------------------

    def drift_at(self, t: float, x: np.ndarray, s: np.ndarray) -> np.ndarray:
        return self.drift_fn(t, x, s)

    def diffusion_at(self, t: float, x: np.ndarray, s: np.ndarray) -> np.ndarray:
        return self.diffusion_fn(t, x, s)

    def _batch(self, x, mu: Ensemble):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xb = x.reshape(1, -1) if single else x
        if xb.shape[1] != self.dim:
            raise ValueError(f"Field {self.name} is {self.dim}-dimensional, got points in R^{xb.shape[1]}")
        s = np.tile(self.measure_statistic(mu), (xb.shape[0], 1))
        return single, xb, s

    def V(self, t: float, x, mu: Ensemble) -> np.ndarray:
        """Drift at one point (d,) or a batch of points (B, d)"""
        single, xb, s = self._batch(x, mu)
        out = self.drift_fn(t, xb, s)
        return out[0] if single else out

    def G(self, t: float, x, mu: Ensemble) -> np.ndarray:
        """Diffusion coefficient at one point (d, K) or a batch (B, d, K)"""
        single, xb, s = self._batch(x, mu)
        out = self.diffusion_fn(t, xb, s)
        return out[0] if single else out

    # -- derivatives ---------------------------------------------------------

    def jacobians(self, t: float, x: np.ndarray, s: np.ndarray):
        """(dV/dx, dV/ds, dG/dx, dG/ds) at a batch of points"""
        if self.drift_jac is not None:
            dv_dx, dv_ds = self.drift_jac(t, x, s)
        else:
            dv_dx = _central_difference(lambda y: self.drift_fn(t, y, s), x)
            dv_ds = _central_difference(lambda r: self.drift_fn(t, x, r), s)
        if self.diffusion_jac is not None:
            dg_dx, dg_ds = self.diffusion_jac(t, x, s)
        else:
            dg_dx = _central_difference(lambda y: self.diffusion_fn(t, y, s), x)
            dg_ds = _central_difference(lambda r: self.diffusion_fn(t, x, r), s)
        return dv_dx, dv_ds, dg_dx, dg_ds

    def __str__(self) -> str:
        return f"CoefficientField {self.name}(d={self.dim}, K={self.modes})"


def diffusion_matrix(field: CoefficientField, t: float, x, mu: Ensemble) -> np.ndarray:
    """A(t, x, mu) = G G^T, exactly symmetric"""
    g = field.G(t, x, mu)
    a = g @ np.swapaxes(g, -1, -2)
    return 0.5 * (a + np.swapaxes(a, -1, -2))


# -- built-in fields -------------------------------------------------------------

def _zeros_like_jac(dim: int, modes: int, q: int):
    def drift_jac(t, x, s):
        B = x.shape[0]
        return np.zeros((B, dim, dim)), np.zeros((B, dim, q))

    def diffusion_jac(t, x, s):
        B = x.shape[0]
        return np.zeros((B, dim, modes, dim)), np.zeros((B, dim, modes, q))

    return drift_jac, diffusion_jac


def constant(sigma: float = 1.0, v: float = 0.0, dim: int = 1) -> CoefficientField:
    """V = v in every coordinate, G = sigma in every row of a single mode"""
    v_vec = np.full(dim, float(v))
    g_mat = np.full((dim, 1), float(sigma))
    drift_jac, diffusion_jac = _zeros_like_jac(dim, 1, 0)
    return CoefficientField(
        name="constant", dim=dim, modes=1,
        drift_fn=lambda t, x, s: np.broadcast_to(v_vec, x.shape).copy(),
        diffusion_fn=lambda t, x, s: np.broadcast_to(g_mat, (x.shape[0], dim, 1)).copy(),
        lipschitz_hint=float(np.sqrt(dim) * (abs(v) + abs(sigma))),
        drift_jac=drift_jac, diffusion_jac=diffusion_jac,
        params={"sigma": sigma, "v": v, "dim": dim},
    )


def linear(a: float = -1.0, sigma: float = 1.0) -> CoefficientField:
    """Scalar V = a x, G = sigma"""
    def drift_jac(t, x, s):
        B = x.shape[0]
        return np.full((B, 1, 1), float(a)), np.zeros((B, 1, 0))

    _, diffusion_jac = _zeros_like_jac(1, 1, 0)
    return CoefficientField(
        name="linear", dim=1, modes=1,
        drift_fn=lambda t, x, s: a * x,
        diffusion_fn=lambda t, x, s: np.full((x.shape[0], 1, 1), float(sigma)),
        lipschitz_hint=float(max(abs(a), abs(sigma))),
        drift_jac=drift_jac, diffusion_jac=diffusion_jac,
        params={"a": a, "sigma": sigma},
    )


def mean_field(a: float = -1.0, b: float = 1.0, sigma: float = 1.0, dim: int = 1) -> CoefficientField:
    """V = a x + b <id, mu>, G = sigma I with K = d"""
    eye = np.eye(dim)

    def drift_jac(t, x, s):
        B = x.shape[0]
        return (np.broadcast_to(a * eye, (B, dim, dim)).copy(),
                np.broadcast_to(b * eye, (B, dim, dim)).copy())

    _, diffusion_jac = _zeros_like_jac(dim, dim, dim)
    return CoefficientField(
        name="mean_field", dim=dim, modes=dim,
        drift_fn=lambda t, x, s: a * x + b * s,
        diffusion_fn=lambda t, x, s: np.broadcast_to(sigma * eye, (x.shape[0], dim, dim)).copy(),
        statistic=mean_statistic(dim),
        lipschitz_hint=float(max(abs(a), abs(b), abs(sigma) * np.sqrt(dim))),
        drift_jac=drift_jac, diffusion_jac=diffusion_jac,
        params={"a": a, "b": b, "sigma": sigma, "dim": dim},
    )


def time_varying(a: float = -1.0, b: float = 0.5, sigma: float = 1.0,
                 omega: float = 2.0 * np.pi) -> CoefficientField:
    """V = c(t)(a x + b <id, mu>), G = sigma (1 + cos(omega t) / 2), c(t) = 1 + sin(omega t) / 2"""
    def c(t):
        return 1.0 + 0.5 * np.sin(omega * t)

    def drift_jac(t, x, s):
        B = x.shape[0]
        return np.full((B, 1, 1), c(t) * a), np.full((B, 1, 1), c(t) * b)

    _, diffusion_jac = _zeros_like_jac(1, 1, 1)
    return CoefficientField(
        name="time_varying", dim=1, modes=1,
        drift_fn=lambda t, x, s: c(t) * (a * x + b * s),
        diffusion_fn=lambda t, x, s: np.full((x.shape[0], 1, 1),
                                             sigma * (1.0 + 0.5 * np.cos(omega * t))),
        statistic=mean_statistic(1),
        lipschitz_hint=float(1.5 * max(abs(a), abs(b), abs(sigma))),
        drift_jac=drift_jac, diffusion_jac=diffusion_jac,
        params={"a": a, "b": b, "sigma": sigma, "omega": omega},
    )


def geometric(a: float = -0.5, sigma: float = 1.0) -> CoefficientField:
    """Scalar V = a x, G = sigma x (multiplicative noise)"""
    def drift_jac(t, x, s):
        B = x.shape[0]
        return np.full((B, 1, 1), float(a)), np.zeros((B, 1, 0))

    def diffusion_jac(t, x, s):
        B = x.shape[0]
        return np.full((B, 1, 1, 1), float(sigma)), np.zeros((B, 1, 1, 0))

    return CoefficientField(
        name="geometric", dim=1, modes=1,
        drift_fn=lambda t, x, s: a * x,
        diffusion_fn=lambda t, x, s: sigma * x[:, :, None],
        lipschitz_hint=float(abs(a) + abs(sigma)),
        drift_jac=drift_jac, diffusion_jac=diffusion_jac,
        params={"a": a, "sigma": sigma},
    )


def kuramoto(kappa: float = 1.0, sigma: float = 0.5) -> CoefficientField:
    """Scalar V = kappa <sin(y - x), mu(dy)>, G = sigma"""
    def drift(t, x, s):
        return kappa * (s[:, 1:2] * np.cos(x) - s[:, 0:1] * np.sin(x))

    def drift_jac(t, x, s):
        dv_dx = kappa * (-s[:, 1:2] * np.sin(x) - s[:, 0:1] * np.cos(x))
        dv_ds = kappa * np.concatenate([-np.sin(x), np.cos(x)], axis=1)
        return dv_dx[:, :, None], dv_ds[:, None, :]

    _, diffusion_jac = _zeros_like_jac(1, 1, 2)
    return CoefficientField(
        name="kuramoto", dim=1, modes=1,
        drift_fn=drift,
        diffusion_fn=lambda t, x, s: np.full((x.shape[0], 1, 1), float(sigma)),
        statistic=circular_statistic(),
        lipschitz_hint=float(abs(kappa) + abs(sigma)),
        drift_jac=drift_jac, diffusion_jac=diffusion_jac,
        params={"kappa": kappa, "sigma": sigma},
    )


def zero(dim: int = 1, modes: int = 1) -> CoefficientField:
    """V = 0, G = 0: the frozen flow"""
    drift_jac, diffusion_jac = _zeros_like_jac(dim, modes, 0)
    return CoefficientField(
        name="zero", dim=dim, modes=modes,
        drift_fn=lambda t, x, s: np.zeros_like(x),
        diffusion_fn=lambda t, x, s: np.zeros((x.shape[0], dim, modes)),
        lipschitz_hint=0.0,
        drift_jac=drift_jac, diffusion_jac=diffusion_jac,
        params={"dim": dim, "modes": modes},
    )


_CATALOG: Dict[str, Callable[..., CoefficientField]] = {
    "constant": constant,
    "linear": linear,
    "mean_field": mean_field,
    "time_varying": time_varying,
    "geometric": geometric,
    "kuramoto": kuramoto,
    "zero": zero,
}


def builtin_fields() -> Dict[str, Callable[..., CoefficientField]]:
    """Named constructors of the built-in coefficient fields"""
    return dict(_CATALOG)


def make_field(name: str, params: Optional[Dict] = None) -> CoefficientField:
    """Instantiate a built-in field by name with keyword parameters"""
    if name not in _CATALOG:
        raise ValueError(f"Unknown coefficient field: {name!r} (known: {', '.join(sorted(_CATALOG))})")
    try:
        return _CATALOG[name](**(params or {}))
    except TypeError as e:
        raise ValueError(f"Bad parameters for field {name!r}: {e}")


# -- regularity probes -------------------------------------------------------------

@dataclass
class LipschitzEstimate:
    """Largest observed ratios from lipschitz_probe"""
    L_hat_x: float
    L_hat_mu: float
    growth_hat: float
    pairs: int
    skipped: int

    def max_ratio(self) -> float:
        return max(self.L_hat_x, self.L_hat_mu, self.growth_hat)

    def to_dict(self) -> Dict:
        return {
            "L_hat_x": self.L_hat_x,
            "L_hat_mu": self.L_hat_mu,
            "growth_hat": self.growth_hat,
            "pairs": self.pairs,
            "skipped": self.skipped,
        }


def _coefficient_gap(field: CoefficientField, t, x, mu, y, nu) -> float:
    dv = field.V(t, x, mu) - field.V(t, y, nu)
    dg = field.G(t, x, mu) - field.G(t, y, nu)
    return float(np.linalg.norm(dv) + np.linalg.norm(dg))


def lipschitz_probe(field: CoefficientField, n_pairs: int, radius: float, seed: int,
                    horizon: float = 1.0, ensemble_size: int = 8) -> LipschitzEstimate:
    """
    Sample random (t, x, y, mu, nu) inside a box of the given radius and return
    the largest observed Lipschitz ratios in x and in mu, plus the largest
    linear-growth ratio (|V| + ||G||_F) / (1 + |x| + W_2(mu, delta_0)).
    """
    if n_pairs < 1:
        raise ValueError("lipschitz_probe needs at least one pair")
    rng = np.random.default_rng(seed)
    d = field.dim
    best_x = best_mu = best_growth = 0.0
    skipped = 0

    for _ in range(n_pairs):
        t = rng.uniform(0.0, horizon)
        x = rng.uniform(-radius, radius, d)
        y = rng.uniform(-radius, radius, d)
        mu = Ensemble(rng.uniform(-radius, radius, (ensemble_size, d)))
        nu = Ensemble(rng.uniform(-radius, radius, (ensemble_size, d)))

        dx = float(np.linalg.norm(x - y))
        w2 = wasserstein2(mu, nu)
        if dx == 0.0 and w2 == 0.0:
            skipped += 1
            continue
        if dx > 0.0:
            best_x = max(best_x, _coefficient_gap(field, t, x, mu, y, mu) / dx)
        if w2 > 0.0:
            best_mu = max(best_mu, _coefficient_gap(field, t, x, mu, x, nu) / w2)

        size = float(np.linalg.norm(field.V(t, x, mu)) + np.linalg.norm(field.G(t, x, mu)))
        best_growth = max(best_growth,
                          size / (1.0 + np.linalg.norm(x) + np.sqrt(second_moment(mu))))

    if field.lipschitz_hint is not None and max(best_x, best_mu, best_growth) > field.lipschitz_hint + 1e-6:
        logger.warning("%s exceeds its declared Lipschitz constant %.4g (observed %.4g)",
                       field, field.lipschitz_hint, max(best_x, best_mu, best_growth))
    return LipschitzEstimate(best_x, best_mu, best_growth, n_pairs, skipped)
