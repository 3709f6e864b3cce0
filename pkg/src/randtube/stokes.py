"""Piola-type transform, divergence checks and the transformed Stokes residual.

For a flow map ``phi`` with ``J = det D phi`` a physical field ``u`` on
``D_t`` is carried to the reference domain by

    u_hat = D phi^{-1} (u o phi),

which for ``J = 1`` is the contravariant Piola map, so ``div u_hat =
(div u) o phi``.  With ``w = D phi u_hat = u o phi`` and the test field
``v_tilde o phi = D phi v`` the pulled-back Stokes weak form reads

    int J [ u_t o phi + D phi^{-T} grad p_hat - f o phi ] . (D phi v)
      + J sum_i (M grad w_i) . grad (D phi v)_i  dy = 0,

with ``M = D phi^{-1} D phi^{-T}`` and
``u_t o phi = D phi u_hat_t + D phi_t u_hat - D w D phi^{-1} phi_t``.
Spatial derivatives of the supplied callables are taken by fourth-order
central differences; integrals use tensor Gauss-Legendre rules on the unit
square.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.polynomial import polynomial as P

from .errors import ConfigError, DegenerateFlow
from .flow import det2, inv2, matmul2, matvec2

FD_STEP = 1e-3


# --- flow maps ----------------------------------------------------------------


class FlowMap:
    """Analytic time-dependent map ``phi(t, .)`` of the plane.

    Subclasses provide the value, ``D phi``, ``phi_t``, ``D phi_t``, the
    second derivatives ``d^2 phi_i / dx_j dx_k`` and the inverse.
    """

    volume_preserving = False

    def value(self, t, x):
        raise NotImplementedError

    def jacobian(self, t, x):
        raise NotImplementedError

    def velocity(self, t, x):
        """``d phi / dt`` at fixed reference point ``x``."""
        raise NotImplementedError

    def jacobian_dt(self, t, x):
        raise NotImplementedError

    def second(self, t, x):
        raise NotImplementedError

    def inverse(self, t, z):
        raise NotImplementedError


class IdentityMap(FlowMap):
    volume_preserving = True

    def value(self, t, x):
        return np.array(x, dtype=float)

    def jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(2), x.shape + (2,)).copy()

    def velocity(self, t, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def jacobian_dt(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (2,))

    def second(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (2, 2))

    def inverse(self, t, z):
        return np.array(z, dtype=float)


@dataclass(frozen=True)
class RotationMap(FlowMap):
    """Rigid rotation about ``center`` by the angle ``angle * t``."""

    angle: float
    center: tuple = (0.5, 0.5)
    volume_preserving = True

    @classmethod
    def random(cls, seed, center=(0.5, 0.5)):
        return cls(float(np.random.default_rng(seed).uniform(0.0, 2.0 * math.pi)), center)

    def _rot(self, t):
        a = self.angle * t
        c, s = math.cos(a), math.sin(a)
        return np.array([[c, -s], [s, c]]), self.angle * np.array([[-s, -c], [c, -s]])

    def value(self, t, x):
        R, _ = self._rot(t)
        c = np.asarray(self.center)
        return (np.asarray(x, dtype=float) - c) @ R.T + c

    def jacobian(self, t, x):
        R, _ = self._rot(t)
        return np.broadcast_to(R, np.shape(x) + (2,)).copy()

    def velocity(self, t, x):
        _, dR = self._rot(t)
        return (np.asarray(x, dtype=float) - np.asarray(self.center)) @ dR.T

    def jacobian_dt(self, t, x):
        _, dR = self._rot(t)
        return np.broadcast_to(dR, np.shape(x) + (2,)).copy()

    def second(self, t, x):
        return np.zeros(np.shape(x) + (2, 2))

    def inverse(self, t, z):
        R, _ = self._rot(t)
        c = np.asarray(self.center)
        return (np.asarray(z, dtype=float) - c) @ R + c


@dataclass(frozen=True)
class QuadraticDilation(FlowMap):
    """``phi(t, x) = x + a t (x_1^2, x_2^2)``: smooth, compressible (``J != 1``)."""

    a: float = 0.5

    def value(self, t, x):
        x = np.asarray(x, dtype=float)
        return x + self.a * t * x**2

    def jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (2,))
        out[..., 0, 0] = 1 + 2 * self.a * t * x[..., 0]
        out[..., 1, 1] = 1 + 2 * self.a * t * x[..., 1]
        return out

    def velocity(self, t, x):
        return self.a * np.asarray(x, dtype=float) ** 2

    def jacobian_dt(self, t, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (2,))
        out[..., 0, 0] = 2 * self.a * x[..., 0]
        out[..., 1, 1] = 2 * self.a * x[..., 1]
        return out

    def second(self, t, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (2, 2))
        out[..., 0, 0, 0] = 2 * self.a * t
        out[..., 1, 1, 1] = 2 * self.a * t
        return out

    def inverse(self, t, z):
        z = np.asarray(z, dtype=float)
        k = self.a * t
        if k == 0:
            return z.copy()
        return (-1.0 + np.sqrt(1.0 + 4.0 * k * z)) / (2.0 * k)


# --- transform and divergence -------------------------------------------------


@dataclass(frozen=True)
class PiolaField:
    """Reference field ``u_hat`` at ``points`` together with the ``D phi`` used."""

    t: float
    points: np.ndarray
    values: np.ndarray
    DT: np.ndarray


def _checked_inverse(DT, t):
    J = det2(DT)
    if not np.all(J > 0):
        raise DegenerateFlow(f"non-invertible map derivative at t={t:.6g} (min det {float(np.min(J)):.3e})",
                             reason="degenerate jacobian")
    return inv2(DT)


def piola_transform(u: Callable, fmap: FlowMap, t, points) -> PiolaField:
    """``u_hat(x) = D phi(t, x)^{-1} u(phi(t, x))`` at reference ``points``."""
    points = np.asarray(points, dtype=float)
    DT = fmap.jacobian(t, points)
    vals = matvec2(_checked_inverse(DT, t), np.asarray(u(fmap.value(t, points)), dtype=float))
    return PiolaField(float(t), points, vals, DT)


def piola_function(u: Callable, fmap: FlowMap, t) -> Callable:
    return lambda x: piola_transform(u, fmap, t, x).values


def inverse_piola(u_hat: Callable, fmap: FlowMap, t, z):
    """Recover ``u(z) = D phi u_hat`` at ``phi^{-1}(z)``."""
    x = fmap.inverse(t, np.asarray(z, dtype=float))
    return matvec2(fmap.jacobian(t, x), np.asarray(u_hat(x), dtype=float))


def piola_divergence(u: Callable, du: Callable, fmap: FlowMap, t, x):
    """Exact ``div u_hat`` from ``u``, its Jacobian ``du`` and the map derivatives."""
    x = np.asarray(x, dtype=float)
    z = fmap.value(t, x)
    DT = fmap.jacobian(t, x)
    Dinv = _checked_inverse(DT, t)
    w = np.asarray(u(z), dtype=float)
    Dw = matmul2(np.asarray(du(z), dtype=float), DT)  # d w_j / d x_i = (Du o phi  D phi)_{ji}
    H = fmap.second(t, x)  # H[..., i, j, k] = d^2 phi_i / dx_j dx_k
    # d_k (D phi^{-1}) = -D phi^{-1} (d_k D phi) D phi^{-1}
    dDinv = -np.einsum("...ij,...jlk,...lm->...imk", Dinv, H, Dinv)
    return (np.einsum("...iji,...j->...", dDinv, w) + np.einsum("...ij,...ji->...", Dinv, Dw))


def divergence_defect(u: Callable, du: Callable, fmap: FlowMap, t, probes):
    """``max |div u_hat - (div u) o phi|`` over ``probes``."""
    probes = np.asarray(probes, dtype=float)
    div_hat = piola_divergence(u, du, fmap, t, probes)
    J = np.asarray(du(fmap.value(t, probes)), dtype=float)
    return float(np.max(np.abs(div_hat - (J[..., 0, 0] + J[..., 1, 1]))))


def discrete_divergence(mesh, values):
    """Vertex divergence of a P1 vector field: area-weighted average of element values."""
    values = np.asarray(values, dtype=float)
    g = mesh.gradients  # (m, 3, 2)
    loc = values[mesh.triangles]  # (m, 3, 2)
    div_el = np.einsum("mia,mia->m", loc, g)
    num = np.zeros(mesh.n_vertices)
    den = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(num, mesh.triangles[:, k], div_el * mesh.areas)
        np.add.at(den, mesh.triangles[:, k], mesh.areas)
    return num / den


# --- finite differences and quadrature ----------------------------------------


def fd_jacobian(func: Callable, x, h=FD_STEP):
    """Fourth-order central-difference Jacobian ``[..., i, j] = d f_i / d x_j``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        d = (-func(x + 2 * e) + 8 * func(x + e) - 8 * func(x - e) + func(x - 2 * e)) / (12 * h)
        cols.append(np.asarray(d, dtype=float))
    return np.stack(cols, axis=-1)


def fd_gradient(func: Callable, x, h=FD_STEP):
    """Gradient of a scalar function by fourth-order central differences."""
    return fd_jacobian(lambda y: np.asarray(func(y))[..., None], x, h)[..., 0, :]


def square_rule(n=16):
    """Tensor Gauss-Legendre points and weights on the unit square."""
    s, w = np.polynomial.legendre.leggauss(n)
    s, w = 0.5 * (s + 1), 0.5 * w
    X, Y = np.meshgrid(s, s, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel()]), np.outer(w, w).ravel()


# --- divergence-free test fields ----------------------------------------------


@dataclass(frozen=True)
class StreamField:
    """``v = (d psi / dy, -d psi / dx)`` for a polynomial stream function ``psi``.

    ``coeffs[i, j]`` multiplies ``x^i y^j``.
    """

    coeffs: np.ndarray

    @classmethod
    def bubble(cls, rng, degree=2):
        """``psi = (x(1-x) y(1-y))^2 q(x, y)`` with random ``q``; ``v`` and its gradient vanish on the boundary."""
        b = P.polypow([0.0, 1.0, -1.0], 2)
        q = rng.standard_normal((degree + 1, degree + 1))
        return cls(_mul2d(np.outer(b, b), q))

    def stream(self, x):
        x = np.asarray(x, dtype=float)
        return P.polyval2d(x[..., 0], x[..., 1], self.coeffs)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        cy = P.polyder(self.coeffs, axis=1)
        cx = P.polyder(self.coeffs, axis=0)
        return np.stack([P.polyval2d(x[..., 0], x[..., 1], cy), -P.polyval2d(x[..., 0], x[..., 1], cx)], -1)

    def jacobian(self, x):
        x = np.asarray(x, dtype=float)
        X, Y = x[..., 0], x[..., 1]
        cxy = P.polyder(P.polyder(self.coeffs, axis=0), axis=1)
        cyy = P.polyder(self.coeffs, m=2, axis=1)
        cxx = P.polyder(self.coeffs, m=2, axis=0)
        vxy = P.polyval2d(X, Y, cxy)
        row0 = np.stack([vxy, P.polyval2d(X, Y, cyy)], -1)
        row1 = np.stack([-P.polyval2d(X, Y, cxx), -vxy], -1)
        return np.stack([row0, row1], -2)

    def laplacian(self, x):
        """Vector Laplacian of ``v``."""
        x = np.asarray(x, dtype=float)
        X, Y = x[..., 0], x[..., 1]
        c = self.coeffs
        d3y = P.polyder(c, m=3, axis=1)
        dxxy = P.polyder(P.polyder(c, m=2, axis=0), axis=1)
        d3x = P.polyder(c, m=3, axis=0)
        dxyy = P.polyder(P.polyder(c, m=2, axis=1), axis=0)
        return np.stack([P.polyval2d(X, Y, dxxy) + P.polyval2d(X, Y, d3y),
                         -P.polyval2d(X, Y, d3x) - P.polyval2d(X, Y, dxyy)], -1)


def _mul2d(a, b):
    out = np.zeros((a.shape[0] + b.shape[0] - 1, a.shape[1] + b.shape[1] - 1))
    for i in range(b.shape[0]):
        for j in range(b.shape[1]):
            out[i:i + a.shape[0], j:j + a.shape[1]] += b[i, j] * a
    return out


@dataclass(frozen=True)
class TrigPressure:
    """``p(x) = sum_k a_k cos(k_1 pi x) cos(k_2 pi y)`` with random amplitudes."""

    amps: np.ndarray

    @classmethod
    def random(cls, rng, order=3):
        return cls(rng.standard_normal((order, order)))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        k = np.arange(self.amps.shape[0])
        cx = np.cos(np.pi * x[..., 0, None] * k)
        cy = np.cos(np.pi * x[..., 1, None] * k)
        return np.einsum("ij,...i,...j->...", self.amps, cx, cy)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        k = np.arange(self.amps.shape[0])
        cx, cy = np.cos(np.pi * x[..., 0, None] * k), np.cos(np.pi * x[..., 1, None] * k)
        sx, sy = -np.pi * k * np.sin(np.pi * x[..., 0, None] * k), -np.pi * k * np.sin(np.pi * x[..., 1, None] * k)
        return np.stack([np.einsum("ij,...i,...j->...", self.amps, sx, cy),
                         np.einsum("ij,...i,...j->...", self.amps, cx, sy)], -1)


# --- residual -----------------------------------------------------------------


@dataclass(frozen=True)
class StokesData:
    """Reference velocity ``u_hat``, its time derivative, pressure and physical load.

    All callables take ``(t, x)``; ``f`` is evaluated at physical points.
    """

    u_hat: Callable
    p_hat: Callable
    f: Callable
    u_hat_t: Callable | None = None


def pressure_term(p_hat: Callable, v: Callable, fmap: FlowMap, t, n_quad=16):
    """``int J (D phi^{-T} grad p_hat) . (D phi v) dy``."""
    x, w = square_rule(n_quad)
    DT = fmap.jacobian(t, x)
    Dinv = _checked_inverse(DT, t)
    gp = fd_gradient(lambda y: p_hat(t, y), x)
    term = np.einsum("...ji,...j,...i->...", Dinv, gp, matvec2(DT, v(x)))
    return float(np.sum(w * det2(DT) * term))


def stokes_residual(data: StokesData, v: Callable, fmap: FlowMap, t, n_quad=16):
    """Left minus right side of the pulled-back Stokes weak form for test field ``v``."""
    if data.u_hat_t is None:
        raise ConfigError("the transformed Stokes residual needs the time derivative of u_hat")
    x, wq = square_rule(n_quad)
    DT = fmap.jacobian(t, x)
    Dinv = _checked_inverse(DT, t)
    J = det2(DT)
    M = matmul2(Dinv, np.swapaxes(Dinv, -1, -2))
    uh = np.asarray(data.u_hat(t, x), dtype=float)
    w_fun = lambda y: matvec2(fmap.jacobian(t, y), np.asarray(data.u_hat(t, y), dtype=float))  # noqa: E731
    Dw = fd_jacobian(w_fun, x)
    phi_t = fmap.velocity(t, x)
    ut_phys = (matvec2(DT, np.asarray(data.u_hat_t(t, x), dtype=float))
               + matvec2(fmap.jacobian_dt(t, x), uh)
               - matvec2(Dw, matvec2(Dinv, phi_t)))
    gp = fd_gradient(lambda y: data.p_hat(t, y), x)
    grad_p_phys = matvec2(np.swapaxes(Dinv, -1, -2), gp)
    f_phys = np.asarray(data.f(t, fmap.value(t, x)), dtype=float)
    vt_fun = lambda y: matvec2(fmap.jacobian(t, y), np.asarray(v(y), dtype=float))  # noqa: E731
    vt = vt_fun(x)
    Dvt = fd_jacobian(vt_fun, x)
    bulk = np.einsum("...i,...i->...", ut_phys + grad_p_phys - f_phys, vt)
    visc = np.einsum("...ia,...ab,...ib->...", Dw, M, Dvt)
    return float(np.sum(wq * J * (bulk + visc)))
