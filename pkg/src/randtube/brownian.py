"""Brownian paths and their one-sided mollification.

The regularised path is

    B^eps(t) = int_0^t rho_eps(t - u) B(u) du,
    dB^eps(t) = B(t) rho_eps(0) + int_0^t rho_eps'(t - u) B(u) du,

where ``rho_eps(s) = rho(s / eps) / eps`` and ``rho`` is the normalised
``exp(-1 / (1 - s^2))`` bump supported on ``[-1, 1]``.  The simulated path is
continued piecewise linearly between grid nodes, so both integrals are linear
functionals of the node values and are evaluated with Gauss-Legendre
quadrature on every grid cell inside the kernel support.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, sparse

from .errors import ConfigError

_GAUSS_ORDER = 8


def _bump(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


def _bump_prime(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1.0
    si = s[inside]
    q = 1.0 - si**2
    out[inside] = np.exp(-1.0 / q) * (-2.0 * si / q**2)
    return out


@functools.lru_cache(maxsize=None)
def _bump_mass():
    val, _ = integrate.quad(lambda s: float(_bump(s)), -1.0, 1.0, epsabs=0.0, epsrel=1e-12, limit=200)
    return val


def rho(s):
    """Standard normalised mollifier profile on ``[-1, 1]``."""
    return _bump(s) / _bump_mass()


def rho_prime(s):
    return _bump_prime(s) / _bump_mass()


@dataclass(frozen=True)
class MollifierConfig:
    """Support half-width ``epsilon`` of the kernel and fine grid step ``delta``."""

    epsilon: float
    delta: float | None = None

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ConfigError(f"mollifier width must be positive, got {self.epsilon}")
        if self.delta is None:
            object.__setattr__(self, "delta", self.epsilon / 10.0)
        if not self.delta > 0:
            raise ConfigError(f"fine grid step must be positive, got {self.delta}")
        if self.delta > self.epsilon / 10.0 * (1 + 1e-12):
            raise ConfigError(
                f"grid step {self.delta} does not resolve the mollifier (need delta <= eps/10 = {self.epsilon / 10})"
            )

    def kernel(self, s):
        return rho(np.asarray(s) / self.epsilon) / self.epsilon

    def kernel_prime(self, s):
        return rho_prime(np.asarray(s) / self.epsilon) / self.epsilon**2

    @property
    def sup_kernel(self):
        """``||rho_eps||_inf``."""
        return float(rho(0.0)) / self.epsilon

    @property
    def sup_kernel_prime(self):
        """``||rho_eps'||_inf`` (maximum of the profile derivative, rescaled)."""
        s = np.linspace(-1, 1, 20001)
        return float(np.max(np.abs(rho_prime(s)))) / self.epsilon**2

    def kernel_mass(self):
        val, _ = integrate.quad(lambda s: float(self.kernel(s)), -self.epsilon, self.epsilon,
                                epsabs=1e-14, epsrel=1e-13, limit=200)
        return val


def simulate_bm(tau, delta, seed, variance_scale=1.0):
    """Simulate a scalar Brownian path on the uniform grid ``0, delta, ..., tau``.

    Returns ``(grid, values)``; increments are i.i.d. ``N(0, variance_scale * delta)``.
    """
    if not tau > 0 or not delta > 0:
        raise ConfigError("tau and delta must be positive")
    n = int(round(tau / delta))
    if n < 1 or abs(n * delta - tau) > 1e-9 * tau:
        raise ConfigError(f"tau={tau} is not an integer multiple of delta={delta}")
    rng = np.random.default_rng(seed)
    incr = rng.normal(0.0, math.sqrt(variance_scale * delta), size=n)
    values = np.concatenate(([0.0], np.cumsum(incr)))
    grid = np.linspace(0.0, tau, n + 1)
    return grid, values


def _weights_at(t, n, delta, eps, nodes, gw):
    a = max(0.0, t - eps)
    j_lo = int(math.floor(a / delta)) + 1
    j_hi = int(math.ceil(t / delta)) - 1
    inner = np.arange(j_lo, j_hi + 1) * delta
    inner = inner[(inner > a) & (inner < t)]
    bps = np.concatenate(([a], inner, [t]))
    left, right = bps[:-1], bps[1:]
    keep = right > left
    left, right = left[keep], right[keep]
    half = 0.5 * (right - left)
    u = (left + half)[:, None] + half[:, None] * nodes[None, :]
    w = half[:, None] * gw[None, :]
    cell = np.clip(np.floor(0.5 * (left + right) / delta).astype(int), 0, n - 1)
    theta = u / delta - cell[:, None]
    k0 = rho((t - u) / eps) / eps * w
    k1 = rho_prime((t - u) / eps) / eps**2 * w
    cols = np.concatenate([np.repeat(cell, len(nodes)), np.repeat(cell + 1, len(nodes))])
    v0 = np.concatenate([(k0 * (1 - theta)).ravel(), (k0 * theta).ravel()])
    v1 = np.concatenate([(k1 * (1 - theta)).ravel(), (k1 * theta).ravel()])
    # point term B(t) rho_eps(0) of the derivative formula
    jt = min(int(math.floor(t / delta)), n - 1)
    th = t / delta - jt
    c0 = float(rho(0.0)) / eps
    cols = np.concatenate([cols, [jt, jt + 1]])
    v1 = np.concatenate([v1, [c0 * (1 - th), c0 * th]])
    v0 = np.concatenate([v0, [0.0, 0.0]])
    return cols, v0, v1


@functools.lru_cache(maxsize=64)
def _weight_matrices(n, delta, eps, times_key):
    times = np.frombuffer(times_key, dtype=float)
    nodes, gw = np.polynomial.legendre.leggauss(_GAUSS_ORDER)
    rows, cols, v0s, v1s = [], [], [], []
    for i, t in enumerate(times):
        c, v0, v1 = _weights_at(float(t), n, delta, eps, nodes, gw)
        rows.append(np.full(len(c), i))
        cols.append(c)
        v0s.append(v0)
        v1s.append(v1)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    shape = (len(times), n + 1)
    w0 = sparse.csr_matrix((np.concatenate(v0s), (rows, cols)), shape=shape)
    w1 = sparse.csr_matrix((np.concatenate(v1s), (rows, cols)), shape=shape)
    return w0, w1


def convolution_operators(n, delta, epsilon, times):
    """Sparse matrices mapping raw node values to ``(B^eps, dB^eps)`` at ``times``."""
    times = np.ascontiguousarray(times, dtype=float)
    tau = n * delta
    if np.any(times < -1e-14) or np.any(times > tau * (1 + 1e-12)):
        raise ConfigError("evaluation times must lie in [0, tau]")
    times = np.clip(times, 0.0, tau)
    return _weight_matrices(int(n), float(delta), float(epsilon), times.tobytes())


@dataclass(frozen=True)
class MollifiedPath:
    """A raw Brownian path together with its mollification on the same grid."""

    grid: np.ndarray
    raw: np.ndarray
    smooth: np.ndarray
    dsmooth: np.ndarray
    variance_at_tau: float
    config: MollifierConfig
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def tau(self):
        return float(self.grid[-1])

    def evaluate(self, times):
        """Return ``(B^eps(t), dB^eps(t))`` for an array of times in ``[0, tau]``."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        n = len(self.grid) - 1
        w0, w1 = convolution_operators(n, self.config.delta, self.config.epsilon, times)
        return w0 @ self.raw, w1 @ self.raw

    def prepare(self, times):
        """Precompute values at ``times`` so later scalar lookups are cheap."""
        b, db = self.evaluate(times)
        for t, bv, dv in zip(np.atleast_1d(times), b, db):
            self._cache[float(t)] = (float(bv), float(dv))

    def at(self, t):
        hit = self._cache.get(float(t))
        if hit is not None:
            return hit
        b, db = self.evaluate([t])
        return float(b[0]), float(db[0])


def _stationary_variance(weights, delta, variance_scale):
    # Cov(B_i, B_j) = s * delta * min(i, j)  =>  w^T C w = s * delta * sum_k (sum_{i>=k} w_i)^2
    tail = np.cumsum(weights[::-1])[::-1]
    return float(variance_scale * delta * np.sum(tail[1:] ** 2))


def mollify(grid, raw, config: MollifierConfig, variance_scale=1.0):
    """Mollify ``raw`` (values on the uniform ``grid``) with the kernel of ``config``."""
    grid = np.asarray(grid, dtype=float)
    raw = np.asarray(raw, dtype=float)
    n = len(grid) - 1
    if n < 1 or raw.shape != grid.shape:
        raise ConfigError("raw path and grid must have the same length >= 2")
    step = grid[1] - grid[0]
    if abs(step - config.delta) > 1e-9 * config.delta:
        raise ConfigError(f"grid step {step} differs from configured delta {config.delta}")
    if config.epsilon < 10 * step * (1 - 1e-12):
        raise ConfigError("grid too coarse relative to the mollifier width")
    w0, w1 = convolution_operators(n, config.delta, config.epsilon, grid)
    smooth = w0 @ raw
    dsmooth = w1 @ raw
    w_tau = np.asarray(w0[-1].todense()).ravel()
    var = _stationary_variance(w_tau, config.delta, variance_scale)
    return MollifiedPath(grid=grid, raw=raw, smooth=smooth, dsmooth=dsmooth,
                         variance_at_tau=var, config=config)


def mollified_batch(seeds, tau, config: MollifierConfig, times, variance_scale=1.0):
    """Mollified values at ``times`` for many seeds at once.

    Row ``i`` matches ``mollify(*simulate_bm(tau, delta, seeds[i], s), ...)``
    evaluated at ``times``; used by the flow-only moment experiments.
    """
    rows = []
    for seed in seeds:
        _, raw = simulate_bm(tau, config.delta, int(seed), variance_scale)
        rows.append(raw)
    raw = np.asarray(rows)
    n = raw.shape[1] - 1
    w0, w1 = convolution_operators(n, config.delta, config.epsilon, times)
    return (w0 @ raw.T).T, (w1 @ raw.T).T
