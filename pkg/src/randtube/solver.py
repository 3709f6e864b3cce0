"""Theta-scheme time stepping for the transformed heat equation.

Every step assembles the system at the stage ``t_{k+theta}`` (flow data
linearly interpolated between the two grid times) and solves

    (M + theta dt L) u_{k+1} = (M - (1 - theta) dt L) u_k + dt F,

with ``L = K + B``.  The flow is integrated alongside, so only two time
levels of flow data are kept in memory.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .assembler import CoefficientSample, Forcing, Mesh, assemble, assemble_load
from .constants import ConstantsAccumulator, PathConstants, compute_constants, poincare_constant
from .errors import ConfigError, NumericalError
from .flow import FlowSnapshot, FlowStepper, integrate_flow

logger = logging.getLogger(__name__)

DIRECT_LIMIT = 20000
ITER_TOL = 1e-10


def time_grid(tau, dt):
    """Uniform grid ``0, dt, ..., tau``; ``tau`` must be a multiple of ``dt``."""
    if not (tau > 0 and dt > 0):
        raise ConfigError("tau and dt must be positive")
    n = int(round(tau / dt))
    if n < 1 or abs(n * dt - tau) > 1e-9 * tau:
        raise ConfigError(f"tau={tau} is not an integer multiple of dt={dt}")
    return np.linspace(0.0, tau, n + 1)


def linear_solve(A, rhs):
    """Direct sparse solve up to :data:`DIRECT_LIMIT` unknowns, ILU-GMRES beyond.

    Returns ``(x, iterations)``; iterations is 0 for the direct path.
    """
    n = A.shape[0]
    A = sparse.csc_matrix(A)
    if n <= DIRECT_LIMIT:
        try:
            return spla.splu(A).solve(rhs), 0
        except RuntimeError as exc:
            raise NumericalError(f"singular system (1-norm estimate {spla.onenormest(A):.3e}): {exc}") from exc
    ilu = spla.spilu(A, drop_tol=1e-5, fill_factor=20)
    pre = spla.LinearOperator(A.shape, ilu.solve)
    its = [0]

    def count(_):
        its[0] += 1

    x, info = spla.gmres(A, rhs, rtol=ITER_TOL, atol=0.0, restart=100, maxiter=50, M=pre,
                         callback=count, callback_type="pr_norm")
    if info != 0:
        res = np.linalg.norm(A @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
        raise NumericalError(f"GMRES did not converge (relative residual {res:.3e})")
    return x, its[0]


class NormTools:
    """Discrete norms on interior dofs of a mesh.

    The dual norm of a load vector ``l`` is ``sqrt(l^T G^{-1} l)`` with
    ``G = K_0 + M_0`` the Gram matrix of the H^1 inner product.
    """

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.M, self.K = mesh.reference_matrices()
        self._gram = None

    @property
    def gram(self):
        if self._gram is None:
            self._gram = spla.splu(sparse.csc_matrix(self.K + self.M))
        return self._gram

    def l2_sq(self, u):
        return float(u @ (self.M @ u))

    def h1_sq(self, u):
        return float(u @ (self.K @ u) + u @ (self.M @ u))

    def dual_sq(self, load):
        return float(load @ self.gram.solve(load))


@dataclass
class PathwiseSolution:
    """Trajectory and norms of one sample.

    ``trajectory`` holds full nodal vectors at ``snapshot_times``.
    ``norms`` has keys ``L2H1_sq``, ``L2L2_sq``, ``max_L2``, ``dual_dudt_sq``,
    ``dual_f_sq``, ``u0_L2_sq``.
    """

    times: np.ndarray
    snapshot_times: np.ndarray
    trajectory: np.ndarray
    final: np.ndarray
    norms: dict
    constants: PathConstants | None = None
    peclet_max: float = 0.0
    iterations: int = 0
    seed: int | None = None
    extras: dict = field(default_factory=dict)

    def wnorm_sq(self):
        """Discrete ``L^2(H^1) + L^2(H^{-1})`` norm of the solution and its time derivative."""
        return self.norms["L2H1_sq"] + self.norms["dual_dudt_sq"]

    def data_norm_sq(self):
        return self.norms["dual_f_sq"] + self.norms["u0_L2_sq"]


def _stage_points(mesh):
    pts, _ = mesh.quadrature_points()
    m, q = pts.shape[:2]
    return np.concatenate([pts.reshape(-1, 2), mesh.vertices]), (m, q)


def solve_pathwise(mesh: Mesh, field_real, forcing: Forcing | None, u0, theta=1.0, dt=1e-2, tau=None,
                   form="standard", store="all", C_P=None, C_M=1.0, dump_hook=None,
                   stencil=None) -> PathwiseSolution:
    """Solve the transformed heat equation of one sample.

    Parameters
    ----------
    mesh : Mesh
    field_real : FieldRealization
    forcing : Forcing or None
        Right-hand side of the standard form (``None`` for ``f = 0``).
    u0 : callable or array
        Initial value; a callable is interpolated at the vertices.
    theta : float
        ``1`` implicit Euler, ``0.5`` Crank-Nicolson.
    store : ``"all"``, ``"final"`` or int
        Which time levels to keep in ``trajectory`` (an int is a stride).
    C_P : float, optional
        Poincare constant; when given the path constants are returned too.
    dump_hook : callable, optional
        Called as ``dump_hook(k, system)`` for every assembled stage.
    """
    if not 0.0 <= theta <= 1.0:
        raise ConfigError(f"theta must lie in [0, 1], got {theta}")
    tau = field_real.tau if tau is None else tau
    times = time_grid(tau, dt)
    nt = len(times) - 1
    if store == "all":
        stride = 1
    elif store == "final":
        stride = None
    else:
        stride = int(store)
        if stride < 1:
            raise ConfigError("snapshot stride must be positive")

    u = mesh.interpolate(u0) if callable(u0) else np.asarray(u0, dtype=float).copy()
    if u.shape != (mesh.n_vertices,):
        raise ConfigError("initial value has the wrong length")
    boundary_vals = u[mesh.boundary]
    if np.any(np.abs(boundary_vals) > 1e-12):
        logger.warning("initial value is not zero on the boundary (max %.3e); boundary dofs set to 0",
                       float(np.max(np.abs(boundary_vals))))
    x = mesh.restrict(u)

    tools = NormTools(mesh)
    pts, shape = _stage_points(mesh)
    nq = shape[0] * shape[1]
    stepper = iter(FlowStepper(field_real, pts, times, stencil=stencil if stencil else mesh.h))
    acc = ConstantsAccumulator()

    def split(snap):
        acc.update(snap, pts)
        return snap

    prev = split(next(stepper))
    static = getattr(field_real, "time_independent", False)
    cached = None

    snaps_t, traj = [], []
    if stride is not None:
        snaps_t.append(0.0)
        traj.append(mesh.extend(x))
    h1_prev = tools.h1_sq(x)
    norms = dict(L2H1_sq=0.0, L2L2_sq=0.0, max_L2=math.sqrt(tools.l2_sq(x)), dual_dudt_sq=0.0,
                 dual_f_sq=0.0, u0_L2_sq=tools.l2_sq(x))
    l2_prev = tools.l2_sq(x)
    peclet = 0.0
    iters = 0
    for k in range(nt):
        nxt = split(next(stepper))
        stage = prev.interpolate(nxt, theta)
        coeff_snap = _slice_snapshot(stage, nq)
        coeffs = CoefficientSample.from_snapshot(coeff_snap, shape)
        if static and cached is not None:
            system = cached[0]
            system.load = assemble_load(mesh, coeffs, forcing, form)
            lu = cached[1]
        else:
            system = assemble(mesh, coeffs, form, forcing, mass=(form != "standard"))
            lu = None
        if k == 0 or not static:
            peclet = max(peclet, coeffs.peclet(mesh))
        if dump_hook is not None:
            dump_hook(k, system)
        dtk = times[k + 1] - times[k]
        L = system.operator
        rhs = system.mass @ x - (1.0 - theta) * dtk * (L @ x) + dtk * system.load
        if lu is None:
            lhs = (system.mass + theta * dtk * L).tocsc()
            if static and mesh.n_interior <= DIRECT_LIMIT:
                lu = spla.splu(lhs)
                cached = (system, lu)
                x_new, its = lu.solve(rhs), 0
            else:
                x_new, its = linear_solve(lhs, rhs)
        else:
            x_new, its = lu.solve(rhs), 0
        iters += its
        if not np.all(np.isfinite(x_new)):
            raise NumericalError(f"non-finite solution at t={times[k + 1]:.6g}")
        dudt = (x_new - x) / dtk
        norms["dual_dudt_sq"] += dtk * tools.dual_sq(tools.M @ dudt)
        norms["dual_f_sq"] += dtk * tools.dual_sq(system.load)
        h1_new, l2_new = tools.h1_sq(x_new), tools.l2_sq(x_new)
        norms["L2H1_sq"] += 0.5 * dtk * (h1_prev + h1_new)
        norms["L2L2_sq"] += 0.5 * dtk * (l2_prev + l2_new)
        norms["max_L2"] = max(norms["max_L2"], math.sqrt(l2_new))
        h1_prev, l2_prev = h1_new, l2_new
        x = x_new
        prev = nxt
        if stride is not None and ((k + 1) % stride == 0 or k + 1 == nt):
            snaps_t.append(float(times[k + 1]))
            traj.append(mesh.extend(x))
    if peclet > 1.0:
        logger.warning("mesh Peclet number %.3g exceeds 1; advection is under-resolved", peclet)
    final = mesh.extend(x)
    if stride is None:
        snaps_t, traj = [float(times[-1])], [final]
    consts = acc.finalize(C_P, C_M) if C_P is not None else None
    return PathwiseSolution(times, np.array(snaps_t), np.array(traj), final, norms, consts, peclet, iters,
                            field_real.sample.seed,
                            extras={"flow_maxima": dict(acc.full)})


def _slice_snapshot(snap, n):
    return FlowSnapshot(snap.t, snap.T[:n], snap.DT[:n], snap.dTdt[:n], snap.grad_Jinv[:n])


def l2_error(mesh: Mesh, u, exact, t):
    """``||u_h - u(t)||_{L^2}`` with the degree-4 rule."""
    pts, w = mesh.quadrature_points(4)
    uh = mesh.evaluate(u, order=4)
    ue = exact(t, pts)
    return math.sqrt(float(np.sum(w * (uh - ue) ** 2)))


def h1_seminorm_error(mesh: Mesh, u, exact_grad, t):
    """``|u_h - u(t)|_{H^1}`` with the degree-4 rule."""
    pts, w = mesh.quadrature_points(4)
    gh = np.einsum("mi,mia->ma", np.asarray(u)[mesh.triangles], mesh.gradients)
    ge = exact_grad(t, pts)
    return math.sqrt(float(np.sum(w * np.sum((gh[:, None, :] - ge) ** 2, axis=-1))))


# --- manufactured solutions -------------------------------------------------


@dataclass(frozen=True)
class Manufactured:
    """Smooth reference solution ``u*(t, y) = g(t) sin(pi x) sin(pi y)`` on the unit square."""

    g: callable = None
    dg: callable = None

    def __post_init__(self):
        if self.g is None:
            object.__setattr__(self, "g", lambda t: 1.0 + t * t)
            object.__setattr__(self, "dg", lambda t: 2.0 * t)

    def value(self, t, y):
        y = np.asarray(y)
        return self.g(t) * np.sin(np.pi * y[..., 0]) * np.sin(np.pi * y[..., 1])

    def dt(self, t, y):
        y = np.asarray(y)
        return self.dg(t) * np.sin(np.pi * y[..., 0]) * np.sin(np.pi * y[..., 1])

    def grad(self, t, y):
        y = np.asarray(y)
        sx, sy = np.sin(np.pi * y[..., 0]), np.sin(np.pi * y[..., 1])
        cx, cy = np.cos(np.pi * y[..., 0]), np.cos(np.pi * y[..., 1])
        return self.g(t) * np.pi * np.stack([cx * sy, sx * cy], axis=-1)

    def hessian(self, t, y):
        y = np.asarray(y)
        sx, sy = np.sin(np.pi * y[..., 0]), np.sin(np.pi * y[..., 1])
        cx, cy = np.cos(np.pi * y[..., 0]), np.cos(np.pi * y[..., 1])
        p2 = self.g(t) * np.pi**2
        hxx = -p2 * sx * sy
        hxy = p2 * cx * cy
        return np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hxx], -1)], -2)


def heat_mode(decay=2.0 * math.pi**2):
    """``exp(-decay t) sin(pi x) sin(pi y)``, an exact solution of the plain heat equation."""
    return Manufactured(lambda t: math.exp(-decay * t), lambda t: -decay * math.exp(-decay * t))


def mms_problem(field_real, exact: Manufactured | None = None, check_boundary=True):
    """Forcing, initial value and exact solution for a manufactured ``u*``.

    For fields with spatially uniform Jacobian ``M_d`` is constant in space
    and the strong operator ``u' + b . grad u - M_d : D^2 u`` is returned as
    a source.  Otherwise the forcing is split as source
    ``u' + b . grad u`` plus flux ``M_d grad u``.
    """
    exact = exact or Manufactured()
    if check_boundary:
        s = np.linspace(0, 1, 11)
        edge = np.concatenate([np.column_stack([s, 0 * s]), np.column_stack([s, 0 * s + 1]),
                               np.column_stack([0 * s, s]), np.column_stack([0 * s + 1, s])])
        if np.max(np.abs(exact.value(0.0, edge))) > 1e-12:
            raise ConfigError("manufactured solution must vanish on the boundary")

    def transport(t, y, c):
        return exact.dt(t, y) + np.einsum("...a,...a->...", c.b, exact.grad(t, y))

    if field_real.spatially_uniform_jacobian:
        def source(t, y, c):
            return transport(t, y, c) - np.einsum("...ab,...ab->...", c.Md, exact.hessian(t, y))
        forcing = Forcing(source=source)
    else:
        def flux(t, y, c):
            return np.einsum("...ab,...b->...a", c.Md, exact.grad(t, y))
        forcing = Forcing(source=transport, flux=flux)
    return forcing, (lambda y: exact.value(0.0, y)), exact


def fitted_slope(xs, errs):
    """Least-squares slope of ``log err`` against ``log x``."""
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(errs, float)), 1)[0])


def spatial_study(field_real, ns, tau, theta=1.0, exact=None, domain="square"):
    """MMS errors at ``tau`` for meshes ``h = 1/n`` with ``dt = h^2``.

    Returns rows ``(h, dt, L2_err, H1_err)``.
    """
    from .assembler import build_mesh

    forcing, u0, ex = mms_problem(field_real, exact)
    rows = []
    for n in ns:
        mesh = build_mesh(domain, 1.0 / n)
        dt = tau / round(tau * n * n)
        sol = solve_pathwise(mesh, field_real, forcing, u0, theta, dt, tau, store="final")
        rows.append((1.0 / n, dt, l2_error(mesh, sol.final, ex.value, tau),
                     h1_seminorm_error(mesh, sol.final, ex.grad, tau)))
    return rows


def temporal_study(field_real, steps, tau, n_fine, theta=1.0, exact=None, domain="square"):
    """MMS errors at ``tau`` for ``dt = 1/k`` on a fixed fine mesh."""
    from .assembler import build_mesh

    forcing, u0, ex = mms_problem(field_real, exact)
    mesh = build_mesh(domain, 1.0 / n_fine)
    rows = []
    for k in steps:
        dt = 1.0 / k
        sol = solve_pathwise(mesh, field_real, forcing, u0, theta, dt, tau, store="final")
        rows.append((1.0 / n_fine, dt, l2_error(mesh, sol.final, ex.value, tau),
                     h1_seminorm_error(mesh, sol.final, ex.grad, tau)))
    return rows


def oscillating_solution(omega=4.0 * math.pi):
    """``(1 + cos(omega t)) sin(pi x) sin(pi y)``; strongly time dependent, for temporal studies."""
    return Manufactured(lambda t: 1.0 + math.cos(omega * t), lambda t: -omega * math.sin(omega * t))


def form_witnesses(mesh: Mesh, field_real, n_functions=200, seed=0, dt=1e-2, tau=None, C_P=None, C_M=1.0,
                   n_stages=3):
    """Garding and boundedness ratios of the standard-form bilinear form.

    With ``L = K + B`` at a stage time and ``G = K0 + M0`` the reference
    ``H^1`` Gram matrix, random interior vectors give

        coercivity  = min (phi' L phi + k0 phi' M0 phi) / (alpha phi' G phi),
        boundedness = max |psi' L phi| / (C1 |phi|_G |psi|_G),

    taken over all functions and ``n_stages`` equispaced stage times.
    """
    tau = field_real.tau if tau is None else tau
    C_P = poincare_constant(mesh) if C_P is None else C_P
    times = time_grid(tau, dt)
    pts, shape = _stage_points(mesh)
    nq = shape[0] * shape[1]
    flow = integrate_flow(field_real, pts, times, stencil=mesh.h)
    consts = compute_constants(flow, C_P, C_M)
    M0, K0 = mesh.reference_matrices()
    G = K0 + M0
    rng = np.random.default_rng(seed)
    phi = rng.standard_normal((mesh.n_interior, n_functions))
    psi = rng.standard_normal((mesh.n_interior, n_functions))
    g_phi = np.sqrt(np.einsum("ij,ij->j", phi, G @ phi))
    g_psi = np.sqrt(np.einsum("ij,ij->j", psi, G @ psi))
    coer, bound = math.inf, 0.0
    for k in np.linspace(0, len(times) - 1, n_stages).round().astype(int):
        snap = _slice_snapshot(flow.snapshot(int(k)), nq)
        L = assemble(mesh, CoefficientSample.from_snapshot(snap, shape), "standard", mass=False).operator
        quad = np.einsum("ij,ij->j", phi, L @ phi) + consts.k0 * np.einsum("ij,ij->j", phi, M0 @ phi)
        coer = min(coer, float(np.min(quad / (consts.alpha * g_phi**2))))
        cross = np.abs(np.einsum("ij,ij->j", psi, L @ phi))
        bound = max(bound, float(np.max(cross / (consts.C1 * g_phi * g_psi))))
    return {"coercivity": coer, "boundedness": bound, "alpha": consts.alpha, "k0": consts.k0,
            "C1": consts.C1, "seed": field_real.sample.seed}
