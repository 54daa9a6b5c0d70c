#!/usr/bin/env python3
"""
Large Deviation Experiment Test Suite
Replica blocks, epsilon sweeps, skeleton continuity, rare-event estimates
and flow regularity checks
"""

import numpy as np
import pytest
from scipy import stats

from coefficients import constant, linear, mean_field, zero
from errors import BudgetError
from flow import ControlPath, NormSpec
from ldp import (EventSpec, EventTarget, SweepConfig, fit_loglog_slope, flow_lipschitz_check, ldp1_sweep,
                 ldp2_sweep, moment_bounds_check, oscillation_family, rare_event_probability, replica_blocks,
                 run_blocks, scaling_check, wilson_interval)
from measure import Ensemble
from noise import TimeGrid, sample_noise_batch
from rate_function import RateOptions

LINEAR_RATE = 0.25 / (1.0 - np.exp(-2.0))
TAIL_EPSILONS = [0.2, 0.1, 0.05, 0.02]


def _banner(title):
    print("=" * 60)
    print(title)
    print("=" * 60)


def _tail_event():
    """{X_T >= 1} for the particle started at 0"""
    return EventSpec.half_space([1.0], 1.0, x0=[0.0])


def _tail(eps, n_mc, seed, tilted, confidence=0.95, workers=1):
    grid = TimeGrid(1.0, 10)
    tilt = ControlPath.constant(grid, [1.0]) if tilted else None
    return rare_event_probability(constant(sigma=1.0, v=0.0), Ensemble.point_mass([0.0]), _tail_event(), eps,
                                  n_mc, seed=seed, grid=grid, tilt=tilt, confidence=confidence, workers=workers)


# -- helpers ---------------------------------------------------------------------------

def test_replica_blocks_partition():
    """Blocks cover the replicas in order, the last one short"""
    _banner("Replica blocks")
    blocks = replica_blocks(10, 4)
    assert [list(b) for b in blocks] == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]]
    print("✓ 10 replicas in blocks of 4\n")


def test_worker_count_does_not_change_results():
    """Block results are concatenated in block order whatever the pool size"""
    _banner("Worker count independence")
    grid = TimeGrid(1.0, 8)

    def task(block):
        return sample_noise_batch(grid, 1, 42, block)[:, :, 0]

    serial = run_blocks(task, 50, workers=1, block_size=7)
    parallel = run_blocks(task, 50, workers=4, block_size=7)
    assert np.array_equal(serial, parallel)
    assert np.array_equal(serial, sample_noise_batch(grid, 1, 42, range(50))[:, :, 0])
    print("✓ 1 and 4 workers agree bitwise\n")


def test_wilson_interval():
    """Zero hits in 100 trials: [0, z^2 / (n + z^2)]"""
    _banner("Wilson interval")
    low, high = wilson_interval(0, 100)
    z2 = stats.norm.ppf(0.975) ** 2
    assert low == 0.0
    assert high == pytest.approx(z2 / (100 + z2), rel=1e-9)
    low, high = wilson_interval(30, 100)
    assert low < 0.3 < high
    with pytest.raises(ValueError):
        wilson_interval(0, 0)
    print(f"✓ 30 of 100: [{low:.4f}, {high:.4f}]\n")


def test_fit_loglog_slope():
    """Exact power laws, two-point fits and zero values"""
    _banner("Log-log slope fit")
    x = [0.1, 0.05, 0.025, 0.0125]
    slope, stderr = fit_loglog_slope(x, [3.0 * v ** 0.5 for v in x])
    assert slope == pytest.approx(0.5, abs=1e-12)
    assert stderr == pytest.approx(0.0, abs=1e-10)
    slope, stderr = fit_loglog_slope(x[:2], [1.0, 2.0])
    assert slope == pytest.approx(-1.0)
    assert np.isnan(stderr)
    assert np.isnan(fit_loglog_slope(x, [0.0, 0.0, 0.0, 1.0])[0])
    print("✓ slope 1/2 recovered\n")


def test_sweep_config_validation():
    """Increasing epsilons, too few replicas and a zero budget are rejected"""
    _banner("Sweep settings")
    with pytest.raises(ValueError):
        SweepConfig([0.1, 0.2], replicas=50, seed=0)
    with pytest.raises(ValueError):
        SweepConfig([0.1, 0.05], replicas=10, seed=0)
    with pytest.raises(ValueError):
        SweepConfig([0.1], replicas=50, seed=0, budget=0.0)
    assert SweepConfig.dyadic_epsilons(0.1, 0.0125) == pytest.approx([0.1, 0.05, 0.025, 0.0125])
    print("✓ invalid sweeps rejected\n")


# -- controlled SDE against the skeleton ----------------------------------------------------

def test_ldp1_without_noise_channel():
    """G = 0: every norm is exactly zero and no slope is fitted"""
    _banner("LDP1 sweep without noise")
    grid = TimeGrid(1.0, 20)
    cfg = SweepConfig([0.1, 0.05, 0.025], replicas=30, seed=1)
    report = ldp1_sweep(zero(), Ensemble([[0.0], [1.0]]), lambda eps: ControlPath.zeros(grid, 1), cfg)
    assert np.all(report.column("mean_norm") == 0.0)
    assert np.all(report.column("mean_measure_distance") == 0.0)
    assert np.isnan(report.slope)
    assert report.notes
    assert report.passed
    print(f"✓ {report.notes[0]}\n")


def test_ldp1_constant_field_slope():
    """Additive noise on a common path: the mean norm scales exactly like sqrt(eps)"""
    _banner("LDP1 sweep on the constant field")
    grid = TimeGrid(1.0, 50)
    cfg = SweepConfig([0.1, 0.05, 0.025, 0.0125], replicas=40, seed=2, workers=2, block_size=16)
    report = ldp1_sweep(constant(sigma=1.0, v=0.0), Ensemble.point_mass([0.0]),
                        lambda eps: ControlPath.constant(grid, [1.0]), cfg)
    assert report.slope == pytest.approx(0.5, abs=1e-8)
    assert report.checks == {"slope_in_band": True, "means_monotone": True}
    assert report.passed
    for row in report.to_dict()["rows"]:
        print(f"✓ eps={row['epsilon']:.4f}: mean norm {row['mean_norm']:.5f}")
    print()


@pytest.mark.slow
def test_ldp1_mean_field_slope():
    """V = -x + mean, sigma = 1, h = 1, eps dyadic from 1e-1 to 1e-4 with 200 replicas"""
    _banner("LDP1 sweep on the mean-field model")
    grid = TimeGrid(1.0, 50)
    cfg = SweepConfig(SweepConfig.dyadic_epsilons(0.1, 1e-4), replicas=200, seed=12, workers=2,
                      track_measures=False)
    report = ldp1_sweep(mean_field(a=-1.0, b=1.0, sigma=1.0), Ensemble([[-1.0], [1.0]]),
                        lambda eps: ControlPath.constant(grid, [1.0]), cfg)
    assert len(report.rows) == 10
    assert 0.4 <= report.slope <= 0.6
    assert report.checks == {"slope_in_band": True, "means_monotone": True}
    print(f"✓ fitted slope {report.slope:.4f} ± {report.slope_stderr:.1e}\n")


def test_ldp1_budget_enforced():
    """A control with energy above N is refused"""
    _banner("LDP1 budget")
    grid = TimeGrid(1.0, 10)
    cfg = SweepConfig([0.1], replicas=30, seed=3, budget=10.0)
    with pytest.raises(BudgetError):
        ldp1_sweep(constant(), Ensemble.point_mass([0.0]), lambda eps: ControlPath.constant(grid, [5.0]), cfg)
    print("✓ integral |h|^2 dt = 25 > 10 rejected\n")


def test_ldp_report_csv(tmp_path):
    """Header carries the schema version, one row per epsilon"""
    _banner("LDP report CSV")
    grid = TimeGrid(1.0, 10)
    cfg = SweepConfig([0.1, 0.05], replicas=30, seed=4, track_measures=False)
    report = ldp1_sweep(constant(), Ensemble.point_mass([0.0]), lambda eps: ControlPath.zeros(grid, 1), cfg)
    path = tmp_path / "ldp1.csv"
    report.to_csv(str(path))
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "schema_version,epsilon,mean_norm,q95_norm,std_norm,replicas"
    assert len(lines) == 3
    print(f"✓ {lines[0]}\n")


# -- continuity of the skeleton map ----------------------------------------------------------

def test_ldp2_constant_field_oracle():
    """G = 1, h_n = sin(2 pi n t): sup_t |int_0^t sin| = 1 / (pi n)"""
    _banner("LDP2 on the constant field")
    grid = TimeGrid(1.0, 4096)
    h = ControlPath.zeros(grid, 1)
    n_list = [1, 2, 4, 8, 16]
    report = ldp2_sweep(constant(sigma=1.0, v=0.0), Ensemble.point_mass([0.0]), h,
                        oscillation_family(h, 1.0), n_list)
    for n, value in zip(n_list, report.column("norm")):
        assert value == pytest.approx(1.0 / (np.pi * n), rel=0.05)
        print(f"✓ n={n}: {value:.5f}")
    assert report.slope == pytest.approx(-1.0, abs=0.05)
    print()


def test_ldp2_linear_field_trend():
    """Weakly convergent controls give a decreasing sequence of skeleton distances"""
    _banner("LDP2 on the linear field")
    grid = TimeGrid(1.0, 4096)
    h = ControlPath.constant(grid, [0.5])
    report = ldp2_sweep(linear(a=-1.0, sigma=1.0), Ensemble([[0.0], [1.0]]), h,
                        oscillation_family(h, 1.0), [1, 2, 4, 8, 16, 32, 64])
    assert report.checks["decreasing_trend"]
    assert report.checks["final_below_tolerance"]
    assert report.oracle["kendall_tau"] == pytest.approx(-1.0)
    print(f"✓ Kendall tau {report.oracle['kendall_tau']:.2f}\n")


def test_ldp2_constant_family():
    """A family equal to h has zero distances and no trend check"""
    _banner("LDP2 on a constant family")
    grid = TimeGrid(1.0, 16)
    h = ControlPath.zeros(grid, 1)
    report = ldp2_sweep(linear(), Ensemble.point_mass([0.0]), h, lambda n: h, [1, 2, 4])
    assert np.all(report.column("norm") == 0.0)
    assert report.notes
    assert report.checks == {}
    print(f"✓ {report.notes[0]}\n")


# -- events and rare-event probabilities ----------------------------------------------------

def test_event_geometry():
    """Closest points of half spaces and balls, degenerate events rejected"""
    _banner("Event geometry")
    half = EventSpec.half_space([1.0], 0.5, x0=[0.0])
    assert half.closest_point(np.array([0.0])).tolist() == [0.5]
    assert half.closest_point(np.array([2.0])).tolist() == [2.0]
    ball = EventSpec.ball([2.0], 1.0, target=EventTarget.MEAN)
    assert ball.closest_point(np.array([0.0])).tolist() == [1.0]
    with pytest.raises(ValueError):
        EventSpec.half_space([0.0], 1.0, x0=[0.0])
    with pytest.raises(ValueError):
        EventSpec.ball([0.0], -1.0, x0=[0.0])
    with pytest.raises(ValueError):
        EventSpec.whole_space()
    print("✓ closest points and validation\n")


def test_event_rate_target():
    """The rate target is the event point closest to the free endpoint"""
    _banner("Event rate target")
    grid = TimeGrid(1.0, 20)
    event = EventSpec.half_space([1.0], 0.5, x0=[0.0])
    target = event.rate_target(linear(), Ensemble.point_mass([0.0]), grid)
    assert target.value.tolist() == [0.5]
    assert target.x0.tolist() == [0.0]
    print(f"✓ target {target.value.tolist()}\n")


def test_whole_space_probability_is_one():
    """Every sample hits the whole space"""
    _banner("Whole-space event")
    est = rare_event_probability(constant(), Ensemble.point_mass([0.0]), EventSpec.whole_space(x0=[0.0]),
                                 0.1, 500, seed=5, grid=TimeGrid(1.0, 10))
    assert est.p_hat == 1.0
    assert est.hits == 500
    assert est.ci_high == pytest.approx(1.0)
    assert est.method == "naive"
    print(f"✓ p_hat = {est.p_hat}, CI [{est.ci_low:.4f}, {est.ci_high:.4f}]\n")


@pytest.mark.slow
def test_naive_gaussian_tail():
    """sqrt(eps) W_1 >= 1 at eps = 0.2"""
    _banner("Naive Monte Carlo on a Gaussian tail")
    exact = stats.norm.sf(1.0 / np.sqrt(0.2))
    est = _tail(0.2, 100_000, seed=6, tilted=False, workers=2)
    stderr = np.sqrt(exact * (1.0 - exact) / 100_000)
    assert abs(est.p_hat - exact) <= 4.0 * stderr
    assert abs(est.p_hat - exact) <= 3.0 * est.half_width
    assert est.ci_low <= est.p_hat <= est.ci_high
    assert est.reliable
    print(f"✓ naive estimate {est.p_hat:.5f} against {exact:.5f}\n")


@pytest.mark.slow
@pytest.mark.parametrize("eps", TAIL_EPSILONS)
def test_importance_sampling_against_gaussian_tail(eps):
    """Tilting by the optimal h = 1 recovers the exact tail down to 1e-12, with ESS >= n_mc / 10"""
    _banner(f"Importance sampling at eps = {eps}")
    exact = stats.norm.sf(1.0 / np.sqrt(eps))
    est = _tail(eps, 100_000, seed=7, tilted=True, workers=2)
    assert est.method == "importance"
    assert abs(est.p_hat - exact) <= 3.0 * est.half_width
    assert est.ess >= est.n_mc / 10
    assert est.reliable
    print(f"✓ estimate {est.p_hat:.4e} against {exact:.4e}, ESS {est.ess:.0f}\n")


@pytest.mark.slow
def test_importance_sampling_agrees_with_naive():
    """At eps = 0.2 the tilted and plain estimates agree within joint 3 sigma"""
    _banner("Importance sampling against naive Monte Carlo")
    z = stats.norm.ppf(0.975)
    naive = _tail(0.2, 100_000, seed=13, tilted=False, workers=2)
    tilted = _tail(0.2, 100_000, seed=14, tilted=True, workers=2)
    joint = np.hypot(naive.half_width / z, tilted.half_width / z)
    assert abs(naive.p_hat - tilted.p_hat) <= 3.0 * joint
    print(f"✓ naive {naive.p_hat:.5f}, tilted {tilted.p_hat:.5f}, joint sigma {joint:.1e}\n")


@pytest.mark.slow
@pytest.mark.parametrize("tilted", [False, True])
def test_interval_coverage(tilted):
    """99% intervals from 100 seeded runs contain the exact tail at least 93 times"""
    _banner(f"Interval coverage ({'importance' if tilted else 'naive'})")
    exact = stats.norm.sf(1.0 / np.sqrt(0.2))
    covered = 0
    for seed in range(100):
        est = _tail(0.2, 5_000, seed=1000 + seed, tilted=tilted, confidence=0.99)
        covered += est.ci_low <= exact <= est.ci_high
    assert covered >= 93
    print(f"✓ {covered} of 100 intervals contain {exact:.5f}\n")


def test_rare_event_validation():
    """Too few samples, eps = 0 and a tilt on a foreign grid"""
    _banner("Rare-event input validation")
    grid = TimeGrid(1.0, 10)
    event = EventSpec.whole_space(x0=[0.0])
    with pytest.raises(ValueError):
        rare_event_probability(constant(), Ensemble.point_mass([0.0]), event, 0.1, 10, 0, grid)
    with pytest.raises(ValueError):
        rare_event_probability(constant(), Ensemble.point_mass([0.0]), event, 0.0, 500, 0, grid)
    with pytest.raises(ValueError):
        rare_event_probability(constant(), Ensemble.point_mass([0.0]), event, 0.1, 500, 0, grid,
                               tilt=ControlPath.zeros(TimeGrid(1.0, 5), 1))
    print("✓ invalid estimates rejected\n")


@pytest.mark.slow
def test_scaling_against_rate():
    """Linear field, half space {x >= 1/2}: -eps log p decreases toward I* = 0.25 / (1 - e^-2)"""
    _banner("Scaling check on the linear field")
    grid = TimeGrid(1.0, 50)
    report = scaling_check(linear(a=-1.0, sigma=1.0), Ensemble.point_mass([0.0]),
                           EventSpec.half_space([1.0], 0.5, x0=[0.0]), TAIL_EPSILONS,
                           n_mc=20_000, seed=8, rate_options=RateOptions(grid))
    assert report.oracle["rate"] == pytest.approx(LINEAR_RATE, rel=0.02)
    assert report.checks["decreasing"]
    assert report.checks["within_band"]
    for row in report.rows:
        print(f"✓ eps={row['epsilon']}: -eps log p = {row['log_rate']:.4f}")
    print()


def test_scaling_unreachable_event():
    """G = 0 and an event off the deterministic path: I* infinite and every p_hat zero"""
    _banner("Scaling check on an unreachable event")
    grid = TimeGrid(1.0, 10)
    report = scaling_check(zero(), Ensemble.point_mass([0.0]), _tail_event(),
                           [0.1, 0.05], n_mc=200, seed=9, rate_options=RateOptions(grid))
    assert report.oracle["rate"] == np.inf
    assert report.checks == {"consistent_unreachable": True}
    assert report.to_dict()["oracle"]["rate"] is None
    print(f"✓ {report.notes[0]}\n")


# -- regularity of the flow ------------------------------------------------------------------

def test_moment_bounds_mean_field():
    """E sup |X|^2 / (1 + |x|^2) stays within a bounded spread over starting points"""
    _banner("Moment bounds on the mean-field model")
    grid = TimeGrid(1.0, 50)
    report = moment_bounds_check(mean_field(), Ensemble([[-1.0], [1.0]]), [0.0, 1.0, 4.0, 16.0], 2,
                                 replicas=100, seed=10, grid=grid, workers=2)
    assert len(report.rows) == 4
    assert report.checks["bounded_spread"]
    assert np.isfinite(report.oracle["spread"])
    print(f"✓ spread {report.oracle['spread']:.3f}\n")


def test_moment_order_validation():
    """p must be even and at most m, and a sweep needs enough replicas"""
    _banner("Moment order validation")
    grid = TimeGrid(1.0, 5)
    for p in (3, 8):
        with pytest.raises(ValueError):
            moment_bounds_check(mean_field(), Ensemble.point_mass([0.0]), [0.0], p, 100, 0, grid,
                                norm=NormSpec(0.25, 6))
    with pytest.raises(ValueError):
        moment_bounds_check(mean_field(), Ensemble.point_mass([0.0]), [0.0], 2, 10, 0, grid)
    print("✓ p = 3, p = 8 and 10 replicas rejected\n")


def test_moment_spread_infinite_when_ratio_vanishes():
    """A tracked point that never moves from 0 has ratio 0"""
    _banner("Moment spread with a vanishing ratio")
    report = moment_bounds_check(zero(), Ensemble.point_mass([0.0]), [0.0, 1.0], 2, 30, 0, TimeGrid(1.0, 5))
    assert report.oracle["spread"] == np.inf
    assert not report.checks["bounded_spread"]
    print("✓ spread is infinite\n")


def test_flow_lipschitz_additive_noise():
    """Additive noise and V = -x + mean: separations decay like e^{-t}, so the ratio is 1"""
    _banner("Flow Lipschitz ratios")
    grid = TimeGrid(1.0, 50)
    report = flow_lipschitz_check(mean_field(a=-1.0, b=1.0, sigma=1.0), Ensemble([[-1.0], [1.0]]), 0.0,
                                  [0.01, 0.1, 1.0], replicas=30, seed=11, grid=grid)
    assert np.allclose(report.column("ratio"), 1.0, rtol=1e-9)
    assert report.oracle["spread"] == pytest.approx(1.0, rel=1e-9)
    assert report.passed
    print(f"✓ ratios {report.column('ratio').tolist()}\n")
