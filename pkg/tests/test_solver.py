import math

import numpy as np
import pytest
from scipy import sparse
from scipy.linalg import eigh

from randtube import solver
from randtube.assembler import build_mesh, eval_coefficients
from randtube.errors import ConfigError, NumericalError
from randtube.fields import ModelConfig, sample_field
from randtube.flow import integrate_flow
from randtube.solver import (Manufactured, NormTools, fitted_slope, form_witnesses, heat_mode, l2_error,
                             mms_problem, solve_pathwise, time_grid)
from randtube.uq import apriori_ratio

MESH = build_mesh("square", 1 / 8)


def zero_field(tau=1.0):
    return sample_field(ModelConfig("zero", tau=tau), 0)


def test_zero_data_gives_zero_trajectory():
    real = sample_field(ModelConfig("affine_tube", tau=0.2), 1)
    sol = solve_pathwise(MESH, real, None, np.zeros(MESH.n_vertices), dt=0.02, C_P=0.2)
    assert not sol.trajectory.any()
    assert apriori_ratio(sol.norms, sol.constants) == 0.0


def test_discrete_eigenvector_decays_geometrically():
    tools = NormTools(MESH)
    lam, vec = eigh(tools.K.toarray(), tools.M.toarray())
    u0 = MESH.extend(vec[:, 0])
    dt, tau = 0.01, 0.1
    sol = solve_pathwise(MESH, zero_field(tau), None, u0, 1.0, dt, tau, store="all")
    for k, u in enumerate(sol.trajectory):
        expect = (1 + dt * lam[0]) ** (-k) * math.sqrt(tools.l2_sq(vec[:, 0]))
        assert math.sqrt(tools.l2_sq(MESH.restrict(u))) == pytest.approx(expect, rel=1e-10)


def test_heat_mode_has_zero_forcing():
    real = zero_field()
    forcing, _, _ = mms_problem(real, heat_mode())
    pts, _ = MESH.quadrature_points()
    flow = integrate_flow(real, pts.reshape(-1, 2), np.linspace(0, 1, 3))
    c = eval_coefficients(flow, 0.3, MESH)
    assert np.max(np.abs(forcing.source(0.3, pts, c))) <= 1e-12


def test_manufactured_solution_must_vanish_on_boundary():
    bad = Manufactured(lambda t: 1.0, lambda t: 0.0)
    object.__setattr__(bad, "value", lambda t, y: np.ones(np.shape(y)[:-1]))
    with pytest.raises(ConfigError):
        mms_problem(zero_field(), bad)


def test_mass_norm_non_increasing_without_advection(rng):
    u0 = MESH.extend(rng.standard_normal(MESH.n_interior))
    sol = solve_pathwise(MESH, zero_field(0.2), None, u0, 1.0, 0.01, 0.2)
    tools = NormTools(MESH)
    norms = [tools.l2_sq(MESH.restrict(u)) for u in sol.trajectory]
    assert all(b <= a * (1 + 1e-13) for a, b in zip(norms, norms[1:]))


@pytest.mark.parametrize("seed", range(3))
def test_growth_with_advection_bounded_by_k0(seed, rng):
    real = sample_field(ModelConfig("kl", tau=0.5, amplitude=2.0), seed)
    u0 = MESH.extend(rng.standard_normal(MESH.n_interior))
    sol = solve_pathwise(MESH, real, None, u0, 1.0, 0.01, 0.5, C_P=0.2)
    tools = NormTools(MESH)
    n0 = math.sqrt(tools.l2_sq(MESH.restrict(u0)))
    for t, u in zip(sol.snapshot_times, sol.trajectory):
        assert math.sqrt(tools.l2_sq(MESH.restrict(u))) <= math.exp(sol.constants.k0 * t) * n0 * (1 + 1e-12)


@pytest.mark.parametrize("theta,order", [(1.0, 1.0), (0.5, 2.0)])
def test_theta_scheme_temporal_order(theta, order):
    real = sample_field(ModelConfig("affine_tube", tau=0.25), 4)
    forcing, u0, _ = mms_problem(real, solver.oscillating_solution())
    ref = solve_pathwise(MESH, real, forcing, u0, theta, 0.25 / 1280, 0.25, store="final").final
    errs, dts = [], []
    for k in (40, 80, 160):
        dt = 0.25 / k
        u = solve_pathwise(MESH, real, forcing, u0, theta, dt, 0.25, store="final").final
        errs.append(math.sqrt(NormTools(MESH).l2_sq(MESH.restrict(u - ref))))
        dts.append(dt)
    assert abs(fitted_slope(dts, errs) - order) <= 0.2


def test_mms_consistency_on_kl_field():
    real = sample_field(ModelConfig("kl", tau=0.25), 1)
    forcing, u0, ex = mms_problem(real)
    errs = []
    for n in (8, 16):
        mesh = build_mesh("square", 1 / n)
        sol = solve_pathwise(mesh, real, forcing, u0, 1.0, 0.25 / (n * n // 4), 0.25, store="final")
        errs.append(l2_error(mesh, sol.final, ex.value, 0.25))
    assert errs[1] < 0.4 * errs[0] and errs[1] < 1e-2


def test_forms_agree_on_affine_tube():
    real = sample_field(ModelConfig("affine_tube", tau=0.25), 3)
    forcing, u0, _ = mms_problem(real)
    a = solve_pathwise(MESH, real, forcing, u0, 1.0, 0.0125, 0.25, "standard")
    b = solve_pathwise(MESH, real, forcing, u0, 1.0, 0.0125, 0.25, "weighted")
    assert np.max(np.abs(a.trajectory - b.trajectory)) <= 1e-10


def test_store_modes():
    u0 = lambda y: np.sin(np.pi * y[..., 0]) * np.sin(np.pi * y[..., 1])  # noqa: E731
    real = zero_field(0.1)
    assert len(solve_pathwise(MESH, real, None, u0, dt=0.01, tau=0.1).trajectory) == 11
    assert len(solve_pathwise(MESH, real, None, u0, dt=0.01, tau=0.1, store="final").trajectory) == 1
    sol = solve_pathwise(MESH, real, None, u0, dt=0.01, tau=0.1, store=4)
    assert np.allclose(sol.snapshot_times, [0.0, 0.04, 0.08, 0.1])


def test_invalid_parameters():
    with pytest.raises(ConfigError):
        solve_pathwise(MESH, zero_field(), None, np.zeros(MESH.n_vertices), theta=1.5)
    with pytest.raises(ConfigError):
        time_grid(1.0, 0.3)
    with pytest.raises(ConfigError):
        solve_pathwise(MESH, zero_field(), None, np.zeros(3))


def test_iterative_branch_matches_direct(monkeypatch):
    A = sparse.diags([-1.0, 2.5, -1.0], [-1, 0, 1], shape=(50, 50))
    rhs = np.arange(50.0)
    direct, _ = solver.linear_solve(A, rhs)
    monkeypatch.setattr(solver, "DIRECT_LIMIT", 0)
    it, n_it = solver.linear_solve(A, rhs)
    assert n_it >= 1 and np.allclose(direct, it, rtol=1e-9)


def test_singular_system_raises():
    with pytest.raises(NumericalError):
        solver.linear_solve(sparse.csc_matrix((3, 3)), np.ones(3))


def test_witnesses_hold_for_zero_field():
    w = form_witnesses(MESH, zero_field(0.2), n_functions=50, dt=0.05)
    assert w["coercivity"] >= 0.5 and w["boundedness"] <= 2.0
    assert w["k0"] == 0.0
