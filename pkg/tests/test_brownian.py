import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from randtube.brownian import MollifierConfig, mollified_batch, mollify, rho, simulate_bm
from randtube.errors import ConfigError


def test_bump_is_normalized():
    s = np.linspace(-1, 1, 200001)
    assert np.trapezoid(rho(s), s) == pytest.approx(1.0, abs=1e-9)
    assert MollifierConfig(0.1).kernel_mass() == pytest.approx(1.0, abs=1e-10)


def test_single_step_is_one_normal_increment():
    grid, raw = simulate_bm(0.5, 0.5, 3)
    r = np.random.default_rng(3).normal(0.0, math.sqrt(0.5), 1)
    assert grid.tolist() == [0.0, 0.5]
    assert raw[0] == 0.0 and raw[1] == r[0]


def test_endpoint_variance_monte_carlo():
    ends = np.array([simulate_bm(1.0, 0.1, s)[1][-1] for s in range(100000)])
    assert np.var(ends) == pytest.approx(1.0, rel=0.05)


@given(seed=st.integers(0, 2**32 - 1))
def test_paths_are_deterministic(seed):
    assert np.array_equal(simulate_bm(1.0, 0.01, seed)[1], simulate_bm(1.0, 0.01, seed)[1])


def test_zero_path_mollifies_to_zero():
    cfg = MollifierConfig(0.1)
    grid = np.linspace(0, 1, 101)
    path = mollify(grid, np.zeros_like(grid), cfg)
    assert not path.smooth.any() and not path.dsmooth.any()


def test_constant_path_after_support():
    # one-sided kernel: the constant c is weighted by the half mass 1/2
    cfg = MollifierConfig(0.1)
    grid = np.linspace(0, 1, 101)
    path = mollify(grid, np.full_like(grid, 2.0), cfg)
    interior = grid >= 0.1 + 1e-12
    assert np.allclose(path.smooth[interior], 1.0, atol=1e-10)
    # both terms are of size c * sup(rho_eps) ~ 45; they cancel up to quadrature error
    assert np.allclose(path.dsmooth[interior], 0.0, atol=1e-7 * 2.0 * cfg.sup_kernel)


def test_derivative_matches_finite_differences():
    # exact for the piecewise-linear path, so the check holds on a smooth input
    cfg = MollifierConfig(0.2, 0.002)
    grid = np.linspace(0, 1, 501)
    path = mollify(grid, np.sin(3 * grid) + grid**2, cfg)
    fd = (path.smooth[2:] - path.smooth[:-2]) / (2 * cfg.delta)
    inner = (grid[1:-1] > 0.21) & (grid[1:-1] < 0.99)
    assert np.max(np.abs(path.dsmooth[1:-1] - fd)[inner]) <= 10 * cfg.delta**2


def test_smoothing_error_decreases_with_width():
    grid = np.linspace(0, 1, 1601)
    raw = np.sin(2 * np.pi * grid)
    errs = []
    for eps in (0.2, 0.1, 0.05, 0.025):
        path = mollify(grid, raw, MollifierConfig(eps, grid[1]))
        # the one-sided kernel halves the value, so compare with raw / 2
        errs.append(np.max(np.abs(path.smooth - 0.5 * raw)[grid > eps]))
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_recorded_variance_matches_ensemble():
    cfg = MollifierConfig(0.05)
    times = np.array([1.0])
    b, _ = mollified_batch(range(20000), 1.0, cfg, times)
    grid, raw = simulate_bm(1.0, cfg.delta, 0)
    path = mollify(grid, raw, cfg)
    assert np.var(b[:, 0]) == pytest.approx(path.variance_at_tau, rel=0.05)


def test_batch_matches_single_path():
    cfg = MollifierConfig(0.05)
    times = np.linspace(0, 1, 11)
    b, db = mollified_batch([4, 5], 1.0, cfg, times)
    grid, raw = simulate_bm(1.0, cfg.delta, 5)
    ev_b, ev_db = mollify(grid, raw, cfg).evaluate(times)
    assert np.allclose(b[1], ev_b, atol=1e-14) and np.allclose(db[1], ev_db, atol=1e-12)


def test_second_differences_do_not_blow_up_under_refinement():
    bounds = []
    for n in (1000, 2000, 4000):
        cfg = MollifierConfig(0.1, 1.0 / n)
        path = mollify(*simulate_bm(1.0, cfg.delta, 8), cfg)
        d2 = np.diff(path.smooth, 2) / cfg.delta**2
        bounds.append(np.max(np.abs(d2[int(0.1 * n):])))
    assert max(bounds) <= 2 * min(bounds)


def test_coarse_grid_rejected():
    with pytest.raises(ConfigError):
        MollifierConfig(0.1, 0.05)
    cfg = MollifierConfig(0.1)
    with pytest.raises(ConfigError):
        mollify(np.linspace(0, 1, 11), np.zeros(11), cfg)
