#!/usr/bin/env python3
"""
Noise Test Suite
Time grids and the keyed Brownian increment streams
"""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from noise import NoisePath, TimeGrid, sample_noise, sample_noise_batch


def test_grid_validation():
    """Zero steps and nonpositive horizons are rejected"""
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 10)
    with pytest.raises(ValueError):
        TimeGrid(float("inf"), 10)


def test_grid_nodes():
    grid = TimeGrid(2.0, 4)
    assert grid.dt == 0.5
    assert grid.nodes.tolist() == [0.0, 0.5, 1.0, 1.5, 2.0]
    assert grid.refine(2) == TimeGrid(2.0, 8)


def test_single_step_shape():
    """M = 1 yields a single K-vector"""
    noise = sample_noise(TimeGrid(1.0, 1), 3, seed=5)
    assert noise.increments.shape == (1, 3)
    assert noise.modes == 3


def test_determinism():
    """Same (grid, K, seed) gives identical matrices; seeds and replicas differ"""
    grid = TimeGrid(1.0, 50)
    a = sample_noise(grid, 2, seed=99)
    b = sample_noise(grid, 2, seed=99)
    assert np.array_equal(a.increments, b.increments)
    assert not np.array_equal(a.increments, sample_noise(grid, 2, seed=100).increments)
    assert not np.array_equal(a.increments, sample_noise(grid, 2, seed=99, replica=1).increments)


def test_batch_independent_of_order():
    """A replica's path does not depend on which other replicas were drawn"""
    grid = TimeGrid(1.0, 20)
    forward = sample_noise_batch(grid, 2, 7, range(6))
    backward = sample_noise_batch(grid, 2, 7, reversed(range(6)))
    assert np.array_equal(forward, backward[::-1])
    assert np.array_equal(forward[4], sample_noise(grid, 2, 7, replica=4).increments)


def test_entry_keyed_by_step_and_mode():
    """Increment (j, k) is the same whatever the number of steps and modes drawn around it"""
    short = sample_noise(TimeGrid(1.0, 10), 3, seed=5, replica=2).increments
    long = sample_noise(TimeGrid(2.0, 20), 2, seed=5, replica=2).increments
    assert np.array_equal(short[:, :2], long[:10])
    single = sample_noise(TimeGrid(0.1, 1), 3, seed=5, replica=2).increments
    assert np.array_equal(single[0], short[0])
    assert not np.array_equal(short[:, 0], short[:, 1])


def test_invalid_keys():
    grid = TimeGrid(1.0, 4)
    with pytest.raises(ValueError):
        sample_noise(grid, 1, seed=-1)
    with pytest.raises(ValueError):
        sample_noise(grid, 1, seed=2 ** 64)
    with pytest.raises(ValueError):
        sample_noise(grid, 0, seed=1)
    assert sample_noise(grid, 1, seed=2 ** 64 - 1).increments.shape == (4, 1)


def test_increment_statistics():
    """Pooled 10^5 increments: variance / dt in [0.98, 1.02], mean within 3 SE, small lag-1 correlation"""
    grid = TimeGrid(1.0, 100_000)
    dw = sample_noise(grid, 1, seed=2024).increments[:, 0]
    n = dw.size
    ratio = np.var(dw) / grid.dt
    assert 0.98 <= ratio <= 1.02
    assert abs(np.mean(dw)) <= 3.0 * np.sqrt(grid.dt / n)
    lag1 = np.corrcoef(dw[:-1], dw[1:])[0, 1]
    assert abs(lag1) <= 3.0 / np.sqrt(n)


def test_variance_scales_with_dt():
    """Halving dt halves the increment variance"""
    coarse = sample_noise(TimeGrid(1.0, 100_000), 1, seed=1).increments
    fine = sample_noise(TimeGrid(1.0, 200_000), 1, seed=2).increments
    assert np.var(fine) / np.var(coarse) == pytest.approx(0.5, rel=0.02)


def test_coarsen_keeps_brownian_path():
    """Summing blocks of increments sees the same W at the coarse nodes"""
    fine = sample_noise(TimeGrid(1.0, 64), 2, seed=3)
    coarse = fine.coarsen(4)
    assert coarse.grid == TimeGrid(1.0, 16)
    assert np.allclose(coarse.brownian_path(), fine.brownian_path()[::4], atol=1e-14)
    with pytest.raises(ValueError):
        fine.coarsen(5)


def test_negated_and_csv(tmp_path):
    noise = sample_noise(TimeGrid(1.0, 5), 2, seed=4)
    assert np.array_equal(noise.negated().increments, -noise.increments)
    path = tmp_path / "noise.csv"
    noise.save_csv(str(path))
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "step,dW_1,dW_2"
    assert len(lines) == 6


def test_increments_are_frozen():
    noise = sample_noise(TimeGrid(1.0, 5), 1, seed=4)
    with pytest.raises(ValueError):
        noise.increments[0, 0] = 1.0


def test_shape_validation():
    with pytest.raises(ValueError):
        NoisePath(np.zeros((3, 1)), TimeGrid(1.0, 4))


@given(st.integers(0, 2 ** 64 - 1), st.integers(0, 1000))
def test_any_key_is_reproducible(seed, replica):
    grid = TimeGrid(1.0, 3)
    a = sample_noise(grid, 2, seed, replica)
    b = sample_noise(grid, 2, seed, replica)
    assert np.array_equal(a.increments, b.increments)
    assert a.seed == seed and a.replica == replica
