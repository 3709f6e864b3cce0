"""Random velocity-field models and their per-sample realizations.

Four models are shipped:

``zero``
    ``v = 0``; the flow is the identity and the transformed problem reduces
    to the plain heat equation.
``affine_tube``
    A spatially affine field whose flow interpolates, from the identity at
    ``t = 0``, the random tube ``(A x + 0.3 cos(Y3 t), B y + 0.3 sin(Y6 t))``
    with ``A = Y1 (sin Y2 + 1.5)``, ``B = Y4 (sin Y5 + 1.5)``,
    ``Y_i ~ U(0, 1)``.  The stretch factors grow geometrically,
    ``a(t) = A^(t/tau)``, and the translation is shifted so ``T_0 = Id``.
``lognormal``
    The scaling ``T_t(y) = y exp(B^eps_t)`` driven by a mollified Brownian
    path; as an Eulerian field this is ``v(t, z) = z dB^eps_t``.  Not
    uniformly bounded in the sample.
``kl``
    A truncated Karhunen-Loeve expansion (Brownian-bridge kernel on the box
    around the hold-all disk, separable sine eigenfunctions) multiplied by
    the cut-off ``1 - |x|^2 / R^2`` so that ``v = 0`` on the boundary of B.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from .brownian import MollifiedPath, MollifierConfig, mollify, simulate_bm
from .errors import ConfigError, DomainError

MODEL_KINDS = ("zero", "affine_tube", "lognormal", "kl")


@dataclass(frozen=True)
class ModelConfig:
    """Velocity-model selection and its parameters.

    Parameters
    ----------
    kind : str
        One of ``zero``, ``affine_tube``, ``lognormal``, ``kl``.
    tau : float
        Final time.
    amplitude : float
        Speed factor. For ``affine_tube`` the tube is traversed ``amplitude``
        times faster; for ``kl`` it scales the expansion.
    shift : float
        Translation amplitude of the affine tube (0.3 in the reference tube).
    offset : float
        Offset inside the stretch factor ``Y (sin Y + offset)``.
    hold_all_radius : float
        Radius of the hold-all disk B centred at the origin (ignored for
        ``lognormal``, which lives on the whole plane).
    epsilon, delta, variance_scale : float
        Mollifier half-width, fine Brownian step (default ``epsilon / 10``)
        and variance per unit time of the driving Brownian motion.
    kl_terms : int
        Modes per direction of the truncated expansion (``kl_terms**2`` per
        velocity component).
    """

    kind: str = "zero"
    tau: float = 1.0
    amplitude: float = 1.0
    shift: float = 0.3
    offset: float = 1.5
    hold_all_radius: float = 6.0
    epsilon: float = 0.05
    delta: float | None = None
    variance_scale: float = 1.0
    kl_terms: int = 3

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        for name in ("tau", "amplitude", "shift", "offset", "hold_all_radius", "epsilon", "variance_scale"):
            val = getattr(self, name)
            if not math.isfinite(val):
                raise ConfigError(f"{name} must be finite, got {val}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.kind == "lognormal":
            MollifierConfig(self.epsilon, self.delta)
            if self.variance_scale <= 0:
                raise ConfigError("variance_scale must be positive")
        if self.kind == "kl" and int(self.kl_terms) < 1:
            raise ConfigError("KL truncation level must be at least 1")
        if self.kind == "affine_tube":
            if self.amplitude < 0 or self.offset <= 1.0:
                raise ConfigError("affine tube needs amplitude >= 0 and offset > 1")
            if self.hold_all_radius < self.affine_extent_bound():
                raise ConfigError(
                    f"hold-all radius {self.hold_all_radius} too small for the affine tube "
                    f"(worst-case extent {self.affine_extent_bound():.3f})"
                )
        if self.hold_all_radius <= 0:
            raise ConfigError("hold_all_radius must be positive")

    @property
    def mollifier(self):
        return MollifierConfig(self.epsilon, self.delta)

    def affine_extent_bound(self, domain_radius=1.0):
        """Worst case of ``|T_t(y)|`` over Y in [0,1]^6, t in [0, tau], ``|y_i| <= domain_radius``."""
        smax = max(1.0, (math.sin(1.0) + self.offset) ** self.amplitude)
        return math.hypot(smax * domain_radius + 2 * abs(self.shift), smax * domain_radius + abs(self.shift))

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}


@dataclass(frozen=True)
class RandomSample:
    """Seed and the scalar draws of one sample."""

    seed: int
    drawn_scalars: tuple
    bm_path: MollifiedPath | None = None


@dataclass(frozen=True)
class FieldRealization:
    """One sampled velocity field; subclasses implement the model algebra."""

    model_id: str
    sample: RandomSample
    config: ModelConfig
    dimension: int = 2
    hold_all_radius: float = math.inf

    # whether D_x T depends on x (decides how grad J^{-1} is obtained)
    spatially_uniform_jacobian = True
    # v . n_B = 0 on the boundary of B
    tangential_on_hold_all = False
    # v does not depend on t (the transformed system can be assembled once)
    time_independent = False

    @property
    def tau(self):
        return self.config.tau

    def velocity(self, t, x):
        raise NotImplementedError

    def velocity_jacobian(self, t, x):
        raise NotImplementedError

    def analytic_flow(self, t, y):
        """Closed-form ``(T_t(y), DT_t(y))`` or ``None``."""
        return None

    def prepare(self, times):
        """Hook for caching time-dependent data at the integrator's stage times."""

    def check_inside(self, x, tol=1e-9):
        if math.isinf(self.hold_all_radius):
            return
        r = np.linalg.norm(np.asarray(x, dtype=float), axis=-1)
        if np.any(r > self.hold_all_radius * (1 + tol)):
            raise DomainError(
                f"point at radius {float(np.max(r)):.6g} outside hold-all disk of radius {self.hold_all_radius}"
            )


@dataclass(frozen=True)
class ZeroField(FieldRealization):
    time_independent = True

    def velocity(self, t, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def velocity_jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (2,))

    def analytic_flow(self, t, y):
        y = np.asarray(y, dtype=float)
        return y.copy(), np.broadcast_to(np.eye(2), y.shape + (2,)).copy()


@dataclass(frozen=True)
class AffineTubeField(FieldRealization):
    """Eulerian field of ``T_t(y) = a(t) * y + c(t)`` (componentwise)."""

    def _coeffs(self):
        y = self.sample.drawn_scalars
        off = self.config.offset
        return y[0] * (math.sin(y[1]) + off), y[3] * (math.sin(y[4]) + off)

    def stretch(self, t):
        """Diagonal of ``DT_t`` and its time derivative."""
        kap, tau = self.config.amplitude, self.config.tau
        a_end, b_end = self._coeffs()
        rates = np.array([math.log(a_end), math.log(b_end)]) * kap / tau
        diag = np.exp(rates * t)
        return diag, rates * diag

    def translation(self, t):
        y = self.sample.drawn_scalars
        kap, s = self.config.amplitude, self.config.shift
        c = np.array([s * (math.cos(y[2] * kap * t) - 1.0), s * math.sin(y[5] * kap * t)])
        dc = np.array([-s * y[2] * kap * math.sin(y[2] * kap * t), s * y[5] * kap * math.cos(y[5] * kap * t)])
        return c, dc

    def velocity(self, t, x):
        x = np.asarray(x, dtype=float)
        diag, ddiag = self.stretch(t)
        c, dc = self.translation(t)
        return (ddiag / diag) * (x - c) + dc

    def velocity_jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        diag, ddiag = self.stretch(t)
        jac = np.diag(ddiag / diag)
        return np.broadcast_to(jac, x.shape + (2,)).copy()

    def analytic_flow(self, t, y):
        y = np.asarray(y, dtype=float)
        diag, _ = self.stretch(t)
        c, _ = self.translation(t)
        return diag * y + c, np.broadcast_to(np.diag(diag), y.shape + (2,)).copy()

    def analytic_inverse(self, t, x):
        diag, _ = self.stretch(t)
        c, _ = self.translation(t)
        return (np.asarray(x, dtype=float) - c) / diag


@dataclass(frozen=True)
class LogNormalField(FieldRealization):
    """``v(t, z) = z dB^eps_t`` so that ``T_t(y) = y exp(B^eps_t)``."""

    @property
    def path(self) -> MollifiedPath:
        return self.sample.bm_path

    def prepare(self, times):
        self.path.prepare(times)

    def velocity(self, t, x):
        _, db = self.path.at(t)
        return np.asarray(x, dtype=float) * db

    def velocity_jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        _, db = self.path.at(t)
        return np.broadcast_to(db * np.eye(2), x.shape + (2,)).copy()

    def lagrangian_velocity(self, t, y):
        """``dT/dt`` at the material point ``y``: ``y exp(B^eps_t) dB^eps_t``."""
        b, db = self.path.at(t)
        return np.asarray(y, dtype=float) * math.exp(b) * db

    def analytic_flow(self, t, y):
        y = np.asarray(y, dtype=float)
        b, _ = self.path.at(t)
        s = math.exp(b)
        return y * s, np.broadcast_to(s * np.eye(2), y.shape + (2,)).copy()


@dataclass(frozen=True)
class KLField(FieldRealization):
    """Cut-off truncated KL field; coefficients ``xi + zeta * t / tau`` per mode."""

    spatially_uniform_jacobian = False
    tangential_on_hold_all = True

    def _modes(self):
        k = int(self.config.kl_terms)
        draws = np.asarray(self.sample.drawn_scalars).reshape(2, 2, k, k)
        j = np.arange(1, k + 1)
        scale = 1.0 / (math.pi**2 * np.outer(j, j))  # sqrt(lambda_j lambda_k)
        return j, scale, draws

    def _basis(self, x):
        r = self.hold_all_radius
        j, _, _ = self._modes()
        s = (x + r) / (2 * r)
        arg = math.pi * s[..., :, None] * j  # (..., 2, k)
        phi = math.sqrt(2.0) * np.sin(arg)
        dphi = math.sqrt(2.0) * math.pi * j * np.cos(arg) / (2 * r)
        return phi, dphi

    def _coefficients(self, t):
        _, scale, draws = self._modes()
        w = t / self.config.tau
        return self.config.amplitude * scale * (draws[:, 0] + w * draws[:, 1])  # (2, k, k)

    def velocity(self, t, x):
        x = np.asarray(x, dtype=float)
        phi, _ = self._basis(x)
        coef = self._coefficients(t)
        g = np.einsum("ijk,...j,...k->...i", coef, phi[..., 0, :], phi[..., 1, :])
        chi = 1.0 - np.sum(x**2, axis=-1) / self.hold_all_radius**2
        return chi[..., None] * g

    def velocity_jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        phi, dphi = self._basis(x)
        coef = self._coefficients(t)
        g = np.einsum("ijk,...j,...k->...i", coef, phi[..., 0, :], phi[..., 1, :])
        dg0 = np.einsum("ijk,...j,...k->...i", coef, dphi[..., 0, :], phi[..., 1, :])
        dg1 = np.einsum("ijk,...j,...k->...i", coef, phi[..., 0, :], dphi[..., 1, :])
        dg = np.stack([dg0, dg1], axis=-1)  # (..., i, m) = d g_i / d x_m
        chi = 1.0 - np.sum(x**2, axis=-1) / self.hold_all_radius**2
        dchi = -2.0 * x / self.hold_all_radius**2
        return chi[..., None, None] * dg + g[..., :, None] * dchi[..., None, :]


def sample_field(config: ModelConfig, seed: int) -> FieldRealization:
    """Draw the realization of ``config`` for ``seed`` (deterministic in both)."""
    seed = int(seed)
    kind = config.kind
    if kind == "zero":
        return ZeroField("zero", RandomSample(seed, ()), config)
    if kind == "affine_tube":
        rng = np.random.default_rng(seed)
        ys = tuple(float(v) for v in rng.uniform(0.0, 1.0, size=6))
        return AffineTubeField("affine_tube", RandomSample(seed, ys), config,
                               hold_all_radius=config.hold_all_radius)
    if kind == "lognormal":
        moll = config.mollifier
        grid, raw = simulate_bm(config.tau, moll.delta, seed, config.variance_scale)
        path = mollify(grid, raw, moll, config.variance_scale)
        incr = tuple(float(v) for v in np.diff(raw))
        return LogNormalField("lognormal", RandomSample(seed, incr, path), config)
    if kind == "kl":
        k = int(config.kl_terms)
        rng = np.random.default_rng(seed)
        draws = tuple(float(v) for v in rng.standard_normal(4 * k * k))
        return KLField("kl", RandomSample(seed, draws), config, hold_all_radius=config.hold_all_radius)
    raise ConfigError(f"unknown model kind {kind!r}")


def eval_velocity(real: FieldRealization, t, x):
    """``v(t, x)`` with time and hold-all checks."""
    if not (-1e-12 <= t <= real.tau * (1 + 1e-12)):
        raise DomainError(f"time {t} outside [0, {real.tau}]")
    real.check_inside(x)
    return real.velocity(t, x)


def eval_velocity_jacobian(real: FieldRealization, t, x):
    """Spatial Jacobian ``D_x v(t, x)``; entry ``[i, j] = d v_i / d x_j``."""
    if not (-1e-12 <= t <= real.tau * (1 + 1e-12)):
        raise DomainError(f"time {t} outside [0, {real.tau}]")
    real.check_inside(x)
    return real.velocity_jacobian(t, x)
