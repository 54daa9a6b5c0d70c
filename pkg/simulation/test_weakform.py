#!/usr/bin/env python3
"""
Weak Form Test Suite
Residual of the measure-valued equation along simulated flows, the
quadratic-variation discriminator and the refinement order
"""

import numpy as np
import pytest

from coefficients import constant, geometric, kuramoto, linear, mean_field, time_varying, zero
from errors import ProvenanceError
from flow import solve_sde
from measure import Ensemble
from noise import TimeGrid, sample_noise
from weakform import (TestFunction, default_cutoff_radius, quadratic_variation_check, terminal_residuals,
                      weak_residual, weak_residual_refinement)


def test_monomial_derivatives():
    """Gradient and Hessian agree with finite differences, including the cutoff band"""
    phi = TestFunction.monomial([2, 1], radius=3.0, flat_radius=1.0)
    rng = np.random.default_rng(0)
    points = rng.uniform(-2.5, 2.5, size=(40, 2))
    assert phi.check_derivatives(points) <= 1e-5


def test_cutoff_support():
    """phi is the bare monomial inside the flat radius and zero outside the support"""
    phi = TestFunction.monomial([3], radius=4.0, flat_radius=2.0, scale=2.0)
    inside = np.array([[-1.5], [0.5], [2.0]])
    assert np.allclose(phi.phi(inside), 2.0 * inside[:, 0] ** 3, rtol=1e-14, atol=0.0)
    outside = np.array([[4.0], [-7.0]])
    assert np.all(phi.phi(outside) == 0.0)
    assert np.all(phi.grad(outside) == 0.0)
    assert np.all(phi.hess(outside) == 0.0)
    assert phi.support_radius == 4.0


def test_test_function_validation():
    with pytest.raises(ValueError):
        TestFunction.monomial([2], radius=1.0, flat_radius=1.0)
    with pytest.raises(ValueError):
        TestFunction.monomial([-1], radius=2.0)


def test_default_radius_covers_paths():
    grid = TimeGrid(1.0, 20)
    traj = solve_sde(linear(), Ensemble([[-3.0], [1.0]]), sample_noise(grid, 1, seed=1), 0.5, grid)
    radius = default_cutoff_radius(traj)
    assert radius >= 2.0 * np.max(np.abs(traj.states))


def test_constant_phi_gives_zero_residual():
    """Constant test function: R(t) = 0 exactly"""
    grid = TimeGrid(1.0, 50)
    field = mean_field(a=-1.0, b=0.5, sigma=1.0)
    init = Ensemble([[-1.0], [0.0], [1.5]])
    noise = sample_noise(grid, 1, seed=2)
    traj = solve_sde(field, init, noise, 0.3, grid)
    phi = TestFunction.constant(3.0, 1, radius=default_cutoff_radius(traj))
    residual = weak_residual(traj, field, phi, noise, 0.3)
    assert np.all(residual.per_step == 0.0)
    assert residual.terminal == 0.0


def test_affine_exactness():
    """Constant drift without noise, linear phi: the quadrature telescopes"""
    grid = TimeGrid(1.0, 40)
    field = constant(sigma=0.0, v=0.75)
    init = Ensemble([[-1.0], [0.25], [2.0]])
    noise = sample_noise(grid, 1, seed=3)
    traj = solve_sde(field, init, noise, 0.2, grid)
    phi = TestFunction.monomial([1], radius=20.0, flat_radius=10.0)
    residual = weak_residual(traj, field, phi, noise, 0.2)
    assert residual.per_step[0] == 0.0
    assert residual.max_abs() <= 1e-12


def test_residual_starts_at_zero():
    grid = TimeGrid(1.0, 30)
    field = kuramoto(kappa=1.0, sigma=0.5)
    init = Ensemble([[0.0], [1.0], [2.0]])
    noise = sample_noise(grid, 1, seed=4)
    traj = solve_sde(field, init, noise, 0.5, grid)
    residual = weak_residual(traj, field, TestFunction.monomial([2], radius=20.0), noise, 0.5)
    assert residual.per_step[0] == 0.0
    assert residual.per_step.shape == (31,)


def test_foreign_noise_rejected():
    """Residuals refuse noise or epsilon that did not drive the trajectory"""
    grid = TimeGrid(1.0, 10)
    field = linear()
    init = Ensemble.point_mass([0.0])
    noise = sample_noise(grid, 1, seed=5)
    traj = solve_sde(field, init, noise, 0.1, grid)
    phi = TestFunction.monomial([2], radius=10.0)
    with pytest.raises(ProvenanceError):
        weak_residual(traj, field, phi, sample_noise(grid, 1, seed=6), 0.1)
    with pytest.raises(ProvenanceError):
        weak_residual(traj, field, phi, sample_noise(grid, 1, seed=5, replica=1), 0.1)
    with pytest.raises(ProvenanceError):
        weak_residual(traj, field, phi, noise, 0.2)


def test_residual_csv(tmp_path):
    grid = TimeGrid(1.0, 4)
    noise = sample_noise(grid, 1, seed=7)
    traj = solve_sde(linear(), Ensemble.point_mass([0.0]), noise, 0.1, grid)
    residual = weak_residual(traj, linear(), TestFunction.monomial([2], radius=10.0), noise, 0.1)
    path = tmp_path / "residual.csv"
    residual.save_csv(str(path))
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "step,time,residual"
    assert len(lines) == 6


SMALL_DRIFT_FIELDS = [
    constant(sigma=1.0, v=0.0),
    linear(a=-0.2, sigma=1.0),
    mean_field(a=-0.2, b=0.1, sigma=1.0),
    time_varying(a=-0.2, b=0.1, sigma=1.0),
    geometric(a=-0.1, sigma=0.5),
    kuramoto(kappa=0.2, sigma=1.0),
]


@pytest.mark.parametrize("field", SMALL_DRIFT_FIELDS, ids=lambda f: f.name)
def test_terminal_residual_mean_zero(field):
    """Terminal residuals over 100 replicas average to zero within 3 standard errors"""
    grid = TimeGrid(1.0, 256)
    init = Ensemble([[-0.5], [0.0], [0.25], [1.0]])
    phi = TestFunction.monomial([2], radius=40.0, flat_radius=20.0)
    terminal = terminal_residuals(field, init, phi, 0.5, grid, replicas=100, seed=10)
    stderr = np.std(terminal, ddof=1) / np.sqrt(terminal.size)
    assert abs(np.mean(terminal)) <= 3.0 * stderr


def test_qv_zero_diffusion():
    """G = 0: no martingale and no predicted variation"""
    grid = TimeGrid(1.0, 20)
    init = Ensemble([[0.0], [1.0]])
    traj = solve_sde(zero(), init, sample_noise(grid, 1, seed=11), 0.4, grid)
    report = quadratic_variation_check(traj, zero(), TestFunction.monomial([2], radius=10.0), 0.4,
                                       replicas=50, seed=12)
    assert report.empirical_qv == 0.0
    assert report.predicted_qv == 0.0
    assert report.passed()


def test_qv_single_particle():
    """One particle, constant G = sigma, phi = x: predicted QV = eps sigma^2 T"""
    grid = TimeGrid(1.0, 50)
    field = constant(sigma=2.0, v=0.0)
    init = Ensemble.point_mass([0.0])
    traj = solve_sde(field, init, sample_noise(grid, 1, seed=13), 0.1, grid)
    phi = TestFunction.monomial([1], radius=50.0, flat_radius=25.0)
    report = quadratic_variation_check(traj, field, phi, 0.1, replicas=300, seed=14)
    assert report.predicted_qv == pytest.approx(0.1 * 4.0 * 1.0)
    assert report.passed()


@pytest.mark.slow
def test_qv_common_noise_discriminator():
    """Two particles on one noise path: the independent-noise prediction is rejected at 5 sigma"""
    grid = TimeGrid(1.0, 50)
    field = constant(sigma=1.0, v=0.0)
    init = Ensemble([[-1.0], [1.0]])
    traj = solve_sde(field, init, sample_noise(grid, 1, seed=15), 0.2, grid)
    phi = TestFunction.monomial([1], radius=50.0, flat_radius=25.0)
    report = quadratic_variation_check(traj, field, phi, 0.2, replicas=1000, seed=16)
    assert report.predicted_qv == pytest.approx(0.2)
    assert report.independent_qv == pytest.approx(0.1)
    assert report.passed()
    assert abs(report.independent_z) >= 5.0


def test_qv_needs_replicas():
    grid = TimeGrid(1.0, 5)
    traj = solve_sde(linear(), Ensemble.point_mass([0.0]), sample_noise(grid, 1, seed=0), 0.1, grid)
    with pytest.raises(ValueError):
        quadratic_variation_check(traj, linear(), TestFunction.monomial([1], radius=10.0), 0.1, 10, 0)


@pytest.mark.slow
def test_refinement_order_one():
    """Constant field, phi = x^2: mean max R^2 decays at order 1 in dt"""
    field = constant(sigma=1.0, v=0.0)
    phi = TestFunction.monomial([2], radius=10.0, flat_radius=8.0)
    report = weak_residual_refinement(field, Ensemble.point_mass([0.0]), phi, 0.1, TimeGrid(1.0, 64),
                                      levels=4, replicas=300, seed=17)
    assert report.steps == [64, 128, 256, 512]
    assert all(b < a for a, b in zip(report.mean_max_sq, report.mean_max_sq[1:]))
    assert abs(report.order - 1.0) <= 0.2


def test_refinement_constant_phi_is_undefined():
    report = weak_residual_refinement(linear(), Ensemble.point_mass([0.0]),
                                      TestFunction.constant(1.0, 1, radius=50.0), 0.1, TimeGrid(1.0, 8),
                                      levels=2, replicas=30, seed=0)
    assert report.mean_max_sq == [0.0, 0.0]
    assert np.isnan(report.order)
    with pytest.raises(ValueError):
        weak_residual_refinement(linear(), Ensemble.point_mass([0.0]),
                                 TestFunction.constant(1.0, 1, radius=50.0), 0.1, TimeGrid(1.0, 8),
                                 levels=1, replicas=30, seed=0)
