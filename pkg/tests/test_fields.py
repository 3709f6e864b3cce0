import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import fd_jacobian
from randtube.errors import ConfigError, DomainError
from randtube.fields import MODEL_KINDS, ModelConfig, eval_velocity, eval_velocity_jacobian, sample_field


def probes(real, rng, n=100):
    t = rng.uniform(0, real.tau, n)
    x = rng.uniform(-1.0, 1.0, (n, 2))
    return t, x


def test_zero_field_vanishes(rng):
    real = sample_field(ModelConfig("zero"), 7)
    for t, x in zip(*probes(real, rng, 20)):
        assert np.array_equal(eval_velocity(real, t, x), [0.0, 0.0])
        assert np.array_equal(eval_velocity_jacobian(real, t, x), np.zeros((2, 2)))


def test_affine_translation_rate_at_zero():
    real = sample_field(ModelConfig("affine_tube"), 3)
    y = real.sample.drawn_scalars
    _, dc = real.translation(0.0)
    assert dc == pytest.approx([0.0, 0.3 * y[5]], abs=1e-15)


def test_affine_translation_derivative_matches_fd():
    real = sample_field(ModelConfig("affine_tube"), 11)
    for t in (0.1, 0.5, 0.9):
        h = 1e-6
        fd = (real.translation(t + h)[0] - real.translation(t - h)[0]) / (2 * h)
        assert np.allclose(real.translation(t)[1], fd, atol=1e-8)


@pytest.mark.parametrize("kind", MODEL_KINDS)
@given(seed=st.integers(0, 2**31 - 1))
def test_seed_determinism(kind, seed):
    cfg = ModelConfig(kind)
    a, b = sample_field(cfg, seed), sample_field(cfg, seed)
    r = np.random.default_rng(seed)
    t, x = r.uniform(0, 1, 100), r.uniform(-1, 1, (100, 2))
    va = np.array([a.velocity(ti, xi) for ti, xi in zip(t, x)])
    vb = np.array([b.velocity(ti, xi) for ti, xi in zip(t, x)])
    assert np.array_equal(va, vb)


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_jacobian_matches_finite_differences(kind, rng):
    real = sample_field(ModelConfig(kind), 5)
    t, x = probes(real, rng)
    for ti, xi in zip(t, x):
        fd = fd_jacobian(lambda z: real.velocity(ti, z), xi)
        assert np.max(np.abs(eval_velocity_jacobian(real, ti, xi) - fd)) <= 1e-6


@given(lam=st.floats(-2.0, 3.0), seed=st.integers(0, 10**6))
def test_affine_field_is_spatially_affine(lam, seed):
    real = sample_field(ModelConfig("affine_tube"), seed)
    x, y, t = np.array([0.3, -0.7]), np.array([-0.2, 0.9]), 0.37
    lhs = real.velocity(t, lam * x + (1 - lam) * y)
    rhs = lam * real.velocity(t, x) + (1 - lam) * real.velocity(t, y)
    assert np.allclose(lhs, rhs, atol=1e-12 * (1 + abs(lam)))


def test_lognormal_jacobian_is_scaled_identity():
    real = sample_field(ModelConfig("lognormal"), 2)
    _, db = real.path.at(0.4)
    assert np.allclose(real.velocity_jacobian(0.4, np.zeros(2)), db * np.eye(2), atol=0)
    # Lagrangian velocity: d/dt (y e^B) = y e^B dB
    b, _ = real.path.at(0.4)
    y = np.array([0.5, -0.25])
    assert np.allclose(real.lagrangian_velocity(0.4, y), real.velocity(0.4, y * math.exp(b)), rtol=1e-14)


def test_kl_field_is_tangential_on_hold_all():
    real = sample_field(ModelConfig("kl"), 9)
    ang = np.linspace(0, 2 * np.pi, 50)
    rim = real.hold_all_radius * np.column_stack([np.cos(ang), np.sin(ang)])
    assert np.max(np.abs(real.velocity(0.5, rim))) <= 1e-12


def test_bounded_models_reject_points_outside_hold_all():
    real = sample_field(ModelConfig("affine_tube"), 0)
    with pytest.raises(DomainError):
        eval_velocity(real, 0.1, np.array([100.0, 0.0]))
    with pytest.raises(DomainError):
        eval_velocity(real, 2.0, np.zeros(2))


@pytest.mark.parametrize("kw", [dict(kind="nope"), dict(kind="affine_tube", hold_all_radius=1.0),
                                dict(tau=0.0), dict(kind="lognormal", delta=0.05),
                                dict(kind="affine_tube", offset=0.5), dict(kind="kl", kl_terms=0)])
def test_invalid_model_configs(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)
