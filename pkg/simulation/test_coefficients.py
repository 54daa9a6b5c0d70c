#!/usr/bin/env python3
"""
Coefficient Field Test Suite
Built-in fields, the diffusion matrix, Jacobians and Lipschitz probes
"""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from coefficients import (CoefficientField, builtin_fields, constant, diffusion_matrix, geometric,
                          kuramoto, lipschitz_probe, make_field, mean_field, zero)
from measure import Ensemble, pushforward


def _custom_field(G):
    G = np.asarray(G, dtype=float)
    d, K = G.shape
    return CoefficientField(
        name="custom", dim=d, modes=K,
        drift_fn=lambda t, x, s: np.zeros_like(x),
        diffusion_fn=lambda t, x, s: np.broadcast_to(G, (x.shape[0], d, K)).copy(),
    )


def test_diffusion_matrix_examples():
    """sigma I, zero and a hand-computed 2x3 case"""
    mu = Ensemble.point_mass([0.0, 0.0])
    scaled = mean_field(a=0.0, b=0.0, sigma=2.0, dim=2)
    assert np.array_equal(diffusion_matrix(scaled, 0.0, [1.0, -1.0], mu), 4.0 * np.eye(2))
    assert np.array_equal(diffusion_matrix(zero(dim=2, modes=3), 0.0, [1.0, 2.0], mu), np.zeros((2, 2)))
    field = _custom_field([[1.0, 0.0, 1.0], [0.0, 2.0, 1.0]])
    assert np.array_equal(diffusion_matrix(field, 0.0, [0.0, 0.0], mu), np.array([[2.0, 1.0], [1.0, 5.0]]))


@given(st.integers(0, 2 ** 32 - 1))
def test_diffusion_matrix_symmetric_psd(seed):
    """A = G G^T is exactly symmetric with no negative eigenvalues"""
    rng = np.random.default_rng(seed)
    field = _custom_field(rng.normal(size=(3, 4)))
    a = diffusion_matrix(field, 0.0, rng.normal(size=(5, 3)), Ensemble.point_mass(np.zeros(3)))
    assert np.array_equal(a, np.swapaxes(a, -1, -2))
    assert np.all(np.linalg.eigvalsh(a) >= -1e-10)


def test_single_point_and_batch():
    """V and G accept one point or a batch"""
    field = mean_field(a=-1.0, b=1.0, sigma=1.0)
    mu = Ensemble([[-1.0], [3.0]])
    assert field.V(0.0, [2.0], mu).shape == (1,)
    assert field.V(0.0, [2.0], mu)[0] == pytest.approx(-2.0 + 1.0)
    assert field.G(0.0, np.zeros((4, 1)), mu).shape == (4, 1, 1)
    with pytest.raises(ValueError):
        field.V(0.0, [1.0, 2.0], mu)


def test_catalog():
    """Every built-in constructor is reachable by name"""
    catalog = builtin_fields()
    for name in ("constant", "linear", "mean_field", "time_varying", "geometric", "kuramoto", "zero"):
        assert name in catalog
        field = make_field(name)
        assert field.name == name
    assert make_field("constant", {"sigma": 2.0, "v": 1.0}).params == {"sigma": 2.0, "v": 1.0, "dim": 1}
    with pytest.raises(ValueError):
        make_field("unknown")
    with pytest.raises(ValueError):
        make_field("linear", {"b": 1.0})


def test_mean_field_mean_stays_zero():
    """Symmetric mu0 under V = -x + <id, mu>: the mean stays 0"""
    field = mean_field(a=-1.0, b=1.0, sigma=0.0)
    points = np.array([[-2.0], [-0.5], [0.5], [2.0]])
    mu = Ensemble(points)
    dt = 0.01
    for _ in range(100):
        velocity = field.V(0.0, mu.points, mu)
        mu = pushforward(mu, mu.points + dt * velocity)
    assert abs(mu.mean()[0]) <= 1e-12


def test_statistics_batch():
    """Weighted statistic per replica"""
    field = mean_field(dim=2)
    points = np.arange(12, dtype=float).reshape(2, 3, 2)
    weights = np.array([0.5, 0.25, 0.25])
    s = field.statistics(points, weights)
    assert s.shape == (2, 2)
    assert np.allclose(s[0], weights @ points[0])
    assert np.allclose(s[1], weights @ points[1])


@pytest.mark.parametrize("name", ["constant", "linear", "mean_field", "time_varying", "geometric", "kuramoto"])
def test_analytic_jacobians(name):
    """Analytic Jacobians agree with central differences"""
    field = make_field(name)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, field.dim))
    s = field.statistics(rng.normal(size=(1, 4, field.dim)), np.full(4, 0.25))
    s = np.repeat(s, 5, axis=0)
    stripped = CoefficientField(field.name, field.dim, field.modes, field.drift_fn, field.diffusion_fn,
                                field.statistic)
    for analytic, numeric in zip(field.jacobians(0.3, x, s), stripped.jacobians(0.3, x, s)):
        assert analytic.shape == numeric.shape
        assert np.allclose(analytic, numeric, atol=1e-6)


def test_statistic_jacobian_fallback():
    """Statistics without an analytic Jacobian use central differences"""
    field = kuramoto()
    x = np.array([[0.3], [1.2]])
    analytic = field.statistic.jacobian(x)
    numeric = type(field.statistic)("circular", 2, field.statistic.fn).jacobian(x)
    assert np.allclose(analytic, numeric, atol=1e-8)


def test_lipschitz_probe_examples():
    """Constant field, exact linear ratio and the mean-field bound"""
    assert lipschitz_probe(constant(sigma=1.0, v=2.0), 200, 5.0, seed=1).L_hat_x == 0.0

    three_x = CoefficientField(
        name="three_x", dim=1, modes=1,
        drift_fn=lambda t, x, s: 3.0 * x,
        diffusion_fn=lambda t, x, s: np.zeros((x.shape[0], 1, 1)),
    )
    estimate = lipschitz_probe(three_x, 200, 5.0, seed=2)
    assert 3.0 - 1e-9 <= estimate.L_hat_x <= 3.0 + 1e-9

    relaxation = lipschitz_probe(mean_field(a=-1.0, b=1.0, sigma=0.0), 500, 5.0, seed=3)
    assert relaxation.L_hat_x <= 1.0 + 1e-9
    assert relaxation.L_hat_mu <= 1.0 + 1e-9


@pytest.mark.parametrize("name", ["constant", "linear", "mean_field", "time_varying", "geometric", "kuramoto", "zero"])
def test_builtins_respect_hint(name):
    """No probed ratio exceeds the declared Lipschitz constant"""
    field = make_field(name)
    estimate = lipschitz_probe(field, 2000, 4.0, seed=11)
    assert estimate.max_ratio() <= field.lipschitz_hint + 1e-6


def test_lipschitz_probe_needs_pairs():
    with pytest.raises(ValueError):
        lipschitz_probe(zero(), 0, 1.0, seed=0)


def test_geometric_noise_is_multiplicative():
    field = geometric(a=0.0, sigma=2.0)
    mu = Ensemble.point_mass([1.0])
    assert field.G(0.0, [3.0], mu)[0, 0] == 6.0
