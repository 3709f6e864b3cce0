"""Flow map and variational equation.

For a realization ``v`` the coupled system

    dT/dt  = v(t, T),            T(0)  = y,
    dDT/dt = D_x v(t, T) DT,     DT(0) = I,

is advanced with the classical fourth-order Runge-Kutta method on the time
grid of the PDE.  ``J = det DT`` and ``DT^{-1}`` are computed from ``DT`` at
every stored stage; ``grad J^{-1}`` is zero for models with spatially uniform
Jacobian and otherwise obtained by central differences from four auxiliary
trajectories started at ``y +- h e_i``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFlow, HoldAllExit

logger = logging.getLogger(__name__)


def det2(m):
    return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]


def inv2(m):
    """Inverse of a stack of 2x2 matrices by the adjugate formula."""
    d = det2(m)
    out = np.empty_like(m)
    out[..., 0, 0] = m[..., 1, 1]
    out[..., 1, 1] = m[..., 0, 0]
    out[..., 0, 1] = -m[..., 0, 1]
    out[..., 1, 0] = -m[..., 1, 0]
    return out / d[..., None, None]


def matmul2(a, b):
    """Product of stacks of 2x2 matrices."""
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0, 0] = a[..., 0, 0] * b[..., 0, 0] + a[..., 0, 1] * b[..., 1, 0]
    out[..., 0, 1] = a[..., 0, 0] * b[..., 0, 1] + a[..., 0, 1] * b[..., 1, 1]
    out[..., 1, 0] = a[..., 1, 0] * b[..., 0, 0] + a[..., 1, 1] * b[..., 1, 0]
    out[..., 1, 1] = a[..., 1, 0] * b[..., 0, 1] + a[..., 1, 1] * b[..., 1, 1]
    return out


def matvec2(a, x):
    return np.stack([a[..., 0, 0] * x[..., 0] + a[..., 0, 1] * x[..., 1],
                     a[..., 1, 0] * x[..., 0] + a[..., 1, 1] * x[..., 1]], axis=-1)


def singular_values2(m):
    """``(sigma_max, sigma_min)`` of stacks of 2x2 matrices in closed form."""
    fro = np.sum(m * m, axis=(-2, -1))
    det = np.abs(det2(m))
    smax = 0.5 * (np.sqrt(fro + 2 * det) + np.sqrt(np.maximum(fro - 2 * det, 0.0)))
    smin = np.divide(det, smax, out=np.zeros_like(det), where=smax > 0)
    return smax, smin


def stage_times(times):
    """Grid times followed by the RK4 midpoints of every step."""
    times = np.asarray(times, dtype=float)
    mids = 0.5 * (times[:-1] + times[1:])
    return np.concatenate([times, mids])


def _rhs(field, t, x, m):
    return field.velocity(t, x), matmul2(field.velocity_jacobian(t, x), m)


def rk4_step(field, t0, tm, t1, x, m):
    """One RK4 step from ``t0`` to ``t1`` with explicit midpoint ``tm``."""
    h = t1 - t0
    k1x, k1m = _rhs(field, t0, x, m)
    k2x, k2m = _rhs(field, tm, x + 0.5 * h * k1x, m + 0.5 * h * k1m)
    k3x, k3m = _rhs(field, tm, x + 0.5 * h * k2x, m + 0.5 * h * k2m)
    k4x, k4m = _rhs(field, t1, x + h * k3x, m + h * k3m)
    x = x + h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
    m = m + h / 6.0 * (k1m + 2 * k2m + 2 * k3m + k4m)
    return x, m


@dataclass(frozen=True)
class FlowSnapshot:
    """Flow data at one time for every evaluation point."""

    t: float
    T: np.ndarray
    DT: np.ndarray
    dTdt: np.ndarray
    grad_Jinv: np.ndarray

    @property
    def J(self):
        return det2(self.DT)

    @property
    def DTinv(self):
        return inv2(self.DT)

    @property
    def Jinv(self):
        return 1.0 / self.J

    def interpolate(self, other: "FlowSnapshot", theta):
        """Linear interpolation ``(1 - theta) * self + theta * other``."""
        if theta == 0.0:
            return self
        if theta == 1.0:
            return other
        lerp = lambda a, b: (1.0 - theta) * a + theta * b  # noqa: E731
        return FlowSnapshot(lerp(self.t, other.t), lerp(self.T, other.T), lerp(self.DT, other.DT),
                            lerp(self.dTdt, other.dTdt), lerp(self.grad_Jinv, other.grad_Jinv))


class FlowStepper:
    """Advance the flow of ``field`` for ``points`` along ``times``.

    Iterating yields one :class:`FlowSnapshot` per grid time, starting with
    the identity at ``times[0]``. Only the current state is kept in memory,
    which is what the PDE solver needs.

    Parameters
    ----------
    field : FieldRealization
    points : (n, 2) array
        Material points ``y``.
    times : (M+1,) array
        Increasing time grid starting at 0.
    stencil : float, optional
        Spacing of the auxiliary trajectories for ``grad J^{-1}``.  Ignored
        when the field has a spatially uniform Jacobian.
    """

    def __init__(self, field, points, times, stencil=None):
        self.field = field
        self.points = np.asarray(points, dtype=float)
        self.times = np.asarray(times, dtype=float)
        if self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0):
            raise ValueError("time grid must start at 0 and increase strictly")
        self.uniform = field.spatially_uniform_jacobian
        self.stencil = None if self.uniform else (stencil or 1e-3)
        n = len(self.points)
        if self.stencil is None:
            self._x0 = self.points
        else:
            h = self.stencil
            offs = np.array([[h, 0.0], [-h, 0.0], [0.0, h], [0.0, -h]])
            self._x0 = np.concatenate([self.points] + [self.points + o for o in offs])
        self.n = n

    def _snapshot(self, t, x, m):
        n = self.n
        J = det2(m)
        if not np.all(J > 0):
            bad = int(np.argmin(J))
            raise DegenerateFlow(f"non-positive Jacobian {J[bad]:.3e} at t={t:.6g}",
                                 seed=self.field.sample.seed, reason="degenerate jacobian")
        if np.isfinite(self.field.hold_all_radius):
            r = np.max(np.linalg.norm(x, axis=-1))
            if r > self.field.hold_all_radius * (1 + 1e-9):
                raise HoldAllExit(f"trajectory left the hold-all disk (|T|={r:.4g}) at t={t:.6g}",
                                  seed=self.field.sample.seed, reason="hold-all exit")
        T, DT = x[:n], m[:n]
        v = self.field.velocity(t, T)
        if self.stencil is None:
            grad = np.zeros_like(T)
        else:
            jinv = 1.0 / J[n:].reshape(4, n)
            h = self.stencil
            grad = np.stack([(jinv[0] - jinv[1]) / (2 * h), (jinv[2] - jinv[3]) / (2 * h)], axis=-1)
        return FlowSnapshot(float(t), T, DT, v, grad)

    def __iter__(self):
        times = self.times
        self.field.prepare(stage_times(times))
        x = self._x0.copy()
        m = np.broadcast_to(np.eye(2), x.shape + (2,)).copy()
        yield self._snapshot(times[0], x, m)
        for k in range(len(times) - 1):
            t0, t1 = times[k], times[k + 1]
            x, m = rk4_step(self.field, t0, 0.5 * (t0 + t1), t1, x, m)
            yield self._snapshot(t1, x, m)


@dataclass(frozen=True)
class FlowRealization:
    """Stored flow of one sample; arrays are indexed ``[time, point, ...]``."""

    times: np.ndarray
    points: np.ndarray
    T: np.ndarray
    DT: np.ndarray
    dTdt: np.ndarray
    grad_Jinv: np.ndarray
    seed: int | None = None

    @property
    def J(self):
        return det2(self.DT)

    @property
    def Jinv(self):
        return 1.0 / self.J

    @property
    def DTinv(self):
        return inv2(self.DT)

    def snapshot(self, k):
        return FlowSnapshot(float(self.times[k]), self.T[k], self.DT[k], self.dTdt[k], self.grad_Jinv[k])

    def snapshots(self):
        for k in range(len(self.times)):
            yield self.snapshot(k)

    def singular_values(self):
        """``(sigma_max, sigma_min)`` of every stored ``DT``."""
        return singular_values2(self.DT)


def integrate_flow(field, points, times, stencil=None) -> FlowRealization:
    """Integrate the flow of ``field`` and store every stage.

    Raises :class:`HoldAllExit` or :class:`DegenerateFlow` (both carry the
    sample seed) when a hypothesis on the flow is violated.
    """
    snaps = list(FlowStepper(field, points, times, stencil))
    return FlowRealization(
        times=np.asarray(times, dtype=float),
        points=np.asarray(points, dtype=float),
        T=np.stack([s.T for s in snaps]),
        DT=np.stack([s.DT for s in snaps]),
        dTdt=np.stack([s.dTdt for s in snaps]),
        grad_Jinv=np.stack([s.grad_Jinv for s in snaps]),
        seed=field.sample.seed,
    )


def inverse_flow_check(flow: FlowRealization, field, indices=None):
    """Max over points of ``|T_t^{-1}(T_t(y)) - y|``.

    ``T_t^{-1}`` is the flow at ``s = t`` of ``-v(t - s)``; in physical time
    this is the original ODE run backwards from ``t`` to 0, so RK4 with
    negative steps on the same grid reuses the forward stage times.
    ``indices`` selects the stored times to check (default: the last).
    """
    times = flow.times
    if indices is None:
        indices = [len(times) - 1]
    worst = 0.0
    for k in indices:
        x = flow.T[k].copy()
        m = np.broadcast_to(np.eye(2), x.shape + (2,)).copy()
        for j in range(k, 0, -1):
            t0, t1 = times[j], times[j - 1]
            x, m = rk4_step(field, t0, 0.5 * (t0 + t1), t1, x, m)
        worst = max(worst, float(np.max(np.linalg.norm(x - flow.points, axis=-1))))
    return worst


def write_boundary_csv(path, flow: FlowRealization, boundary_index, stride=1):
    """Write ``T(t_k, y)`` for boundary points ``y`` as ``time,vertex,x,y`` rows."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("time,vertex,x,y\n")
        for k in range(0, len(flow.times), stride):
            for v in boundary_index:
                px, py = flow.T[k, v]
                fh.write(f"{flow.times[k]:.17g},{int(v)},{px:.17g},{py:.17g}\n")


def flow_checks(field, points, times):
    """Identities of one integrated flow; returns a dict of worst-case defects.

    Keys: ``analytic`` (vs closed form, NaN if none), ``inverse``,
    ``DT_DTinv``, ``det_vs_J``, ``det_vs_sv``, ``sandwich`` (bool).
    """
    flow = integrate_flow(field, points, times)
    out = {}
    if field.analytic_flow(0.0, flow.points[:1]) is not None:
        err = 0.0
        for k, t in enumerate(flow.times):
            T, DT = field.analytic_flow(float(t), flow.points)
            err = max(err, float(np.max(np.abs(flow.T[k] - T))), float(np.max(np.abs(flow.DT[k] - DT))))
        out["analytic"] = err
    else:
        out["analytic"] = float("nan")
    out["inverse"] = inverse_flow_check(flow, field)
    DTinv = flow.DTinv
    out["DT_DTinv"] = float(np.max(np.abs(matmul2(flow.DT, DTinv) - np.eye(2))))
    J = flow.J
    out["det_vs_J"] = float(np.max(np.abs(det2(flow.DT) - J)))
    smax, smin = singular_values2(flow.DT)
    sv = np.linalg.svd(flow.DT, compute_uv=False)
    out["det_vs_sv"] = float(np.max(np.abs(J - sv[..., 0] * sv[..., 1])))
    cd = max(float(np.max(smax)), float(np.max(1.0 / smin)))
    lo, hi = 1.0 / cd, cd
    tol = 1e-12
    out["sandwich"] = bool(np.all(smin >= lo * (1 - tol)) and np.all(smax <= hi * (1 + tol))
                           and np.all(J >= lo**2 * (1 - tol)) and np.all(J <= hi**2 * (1 + tol)))
    out["C_D"] = cd
    return flow, out


def rk_order(field, points, tau, steps=(10, 20, 40, 80)):
    """Errors against the closed-form flow at ``tau`` and the fitted convergence order."""
    errs = []
    for n in steps:
        flow = integrate_flow(field, points, np.linspace(0.0, tau, n + 1))
        T, _ = field.analytic_flow(tau, flow.points)
        errs.append(float(np.max(np.abs(flow.T[-1] - T))))
    slope = float(np.polyfit(np.log(1.0 / np.asarray(steps, float)), np.log(errs), 1)[0])
    return errs, slope
