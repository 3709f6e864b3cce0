"""P1 finite elements on the reference domain and the transformed heat system.

The standard form of the pulled-back heat equation on the fixed domain is

    (u', phi) + (b . grad u, phi) + (M_d grad u, grad phi) = (f, phi),

with ``M_d = DT^{-1} DT^{-T}`` and ``b = A grad J^{-1} - DT^{-1} (v o T)``,
``A = J M_d``.  Testing with ``J phi`` gives the weighted form

    (J u', phi) + (J c . grad u, phi) + (A grad u, grad phi) = (J f, phi),

with ``c = -DT^{-1} (v o T)``.  Both are assembled on interior degrees of
freedom only (homogeneous Dirichlet data is eliminated).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import sparse

from .errors import ConfigError, NumericalError
from .flow import FlowRealization, FlowSnapshot, det2, inv2, matmul2, matvec2

logger = logging.getLogger(__name__)

FORMS = ("standard", "weighted")

# barycentric quadrature rules: (points (q, 3), weights summing to 1)
_RULE_DEG2 = (
    np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]),
    np.full(3, 1 / 3),
)
_A1, _B1 = 0.445948490915965, 0.091576213509771
_W1, _W2 = 0.223381589678011, 0.109951743655322
_RULE_DEG4 = (
    np.array([
        [1 - 2 * _A1, _A1, _A1], [_A1, 1 - 2 * _A1, _A1], [_A1, _A1, 1 - 2 * _A1],
        [1 - 2 * _B1, _B1, _B1], [_B1, 1 - 2 * _B1, _B1], [_B1, _B1, 1 - 2 * _B1],
    ]),
    np.array([_W1, _W1, _W1, _W2, _W2, _W2]),
)


def quadrature_rule(order=2):
    """Barycentric points and weights of the degree-2 (3 pt) or degree-4 (6 pt) rule."""
    if order == 2:
        return _RULE_DEG2
    if order == 4:
        return _RULE_DEG4
    raise ConfigError(f"no quadrature rule of order {order}")


class _Pattern:
    """Scatter map from element matrices to the CSR data of the interior block."""

    def __init__(self, triangles, interior_index, n_interior):
        li = interior_index[triangles]  # (m, 3), -1 for boundary vertices
        rows = np.repeat(li, 3, axis=1).ravel()
        cols = np.tile(li, (1, 3)).ravel()
        keep = (rows >= 0) & (cols >= 0)
        self.keep = keep
        r, c = rows[keep], cols[keep]
        pattern = sparse.csr_matrix((np.ones(len(r)), (r, c)), shape=(n_interior, n_interior))
        pattern.sort_indices()
        self.indptr = pattern.indptr
        self.indices = pattern.indices
        self.nnz = pattern.nnz
        self.shape = (n_interior, n_interior)
        # position of each (r, c) entry inside the sorted CSR data
        keys = np.repeat(np.arange(n_interior, dtype=np.int64), np.diff(self.indptr)) * n_interior + self.indices
        pos = np.searchsorted(keys, r.astype(np.int64) * n_interior + c)
        self.pos = pos
        vec_li = li.ravel()
        self.vec_keep = vec_li >= 0
        self.vec_pos = vec_li[self.vec_keep]

    def matrix(self, element_matrices):
        vals = element_matrices.reshape(-1)[self.keep]
        data = np.bincount(self.pos, weights=vals, minlength=self.nnz)
        return sparse.csr_matrix((data, self.indices, self.indptr), shape=self.shape)

    def vector(self, element_vectors):
        vals = element_vectors.reshape(-1)[self.vec_keep]
        return np.bincount(self.vec_pos, weights=vals, minlength=self.shape[0])


@dataclass
class Mesh:
    """Conforming triangulation of the reference domain."""

    vertices: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray
    kind: str = "square"
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        self.boundary = np.asarray(self.boundary, dtype=bool)
        if np.any(self.areas <= 0):
            raise ConfigError("mesh has non-positive triangle areas")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def interior(self):
        return np.nonzero(~self.boundary)[0]

    @property
    def interior_index(self):
        """Map vertex -> interior dof index (-1 on the boundary)."""
        if "iidx" not in self._cache:
            idx = np.full(self.n_vertices, -1, dtype=np.int64)
            idx[self.interior] = np.arange(len(self.interior))
            self._cache["iidx"] = idx
        return self._cache["iidx"]

    @property
    def n_interior(self):
        return len(self.interior)

    @property
    def corners(self):
        return self.vertices[self.triangles]  # (m, 3, 2)

    @property
    def areas(self):
        if "areas" not in self._cache:
            p = self.vertices[self.triangles]
            e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
            self._cache["areas"] = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        return self._cache["areas"]

    @property
    def h(self):
        p = self.corners
        edges = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
        return float(np.max(np.linalg.norm(edges, axis=-1)))

    @property
    def gradients(self):
        """Constant gradients of the three hat functions per triangle, ``(m, 3, 2)``."""
        if "grads" not in self._cache:
            p = self.corners
            x, y = p[..., 0], p[..., 1]
            twice = 2.0 * self.areas
            gx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
            gy = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
            self._cache["grads"] = np.stack([gx, gy], axis=-1) / twice[:, None, None]
        return self._cache["grads"]

    def quadrature_points(self, order=2):
        """Physical quadrature points ``(m, q, 2)`` and weights ``(m, q)``."""
        key = ("qp", order)
        if key not in self._cache:
            bary, w = quadrature_rule(order)
            pts = np.einsum("qi,mia->mqa", bary, self.corners)
            self._cache[key] = (pts, self.areas[:, None] * w[None, :])
        return self._cache[key]

    @property
    def pattern(self) -> _Pattern:
        if "pattern" not in self._cache:
            self._cache["pattern"] = _Pattern(self.triangles, self.interior_index, self.n_interior)
        return self._cache["pattern"]

    def reference_matrices(self):
        """Unweighted mass and Laplacian stiffness on interior dofs."""
        if "ref" not in self._cache:
            bary, w = quadrature_rule(2)
            grads = self.gradients
            ke = np.einsum("mia,mja->mij", grads, grads) * self.areas[:, None, None]
            me = np.einsum("qi,qj,q->ij", bary, bary, w)[None] * self.areas[:, None, None]
            self._cache["ref"] = (self.pattern.matrix(me), self.pattern.matrix(ke))
        return self._cache["ref"]

    def restrict(self, u):
        return np.asarray(u)[self.interior]

    def extend(self, u_interior):
        out = np.zeros(self.n_vertices)
        out[self.interior] = u_interior
        return out

    def interpolate(self, func):
        """Nodal interpolant of ``func(points) -> values``."""
        return np.asarray(func(self.vertices), dtype=float)

    def evaluate(self, u, order=2):
        """Values of the P1 function with nodal values ``u`` at the quadrature points."""
        bary, _ = quadrature_rule(order)
        return np.einsum("qi,mi->mq", bary, np.asarray(u)[self.triangles])


def _square_mesh(n):
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    vid = lambda i, j: j * (n + 1) + i  # noqa: E731
    tris = []
    for j in range(n):
        for i in range(n):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            if (i + j) % 2 == 0:
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]
    bnd = (np.isclose(verts[:, 0], 0) | np.isclose(verts[:, 0], 1)
           | np.isclose(verts[:, 1], 0) | np.isclose(verts[:, 1], 1))
    return Mesh(verts, np.array(tris), bnd, "square")


def _zip_rings(inner, outer, ang_in, ang_out):
    tris = []
    p, q = len(inner), len(outer)
    ia = ib = 0
    while ia < p or ib < q:
        na = ang_in[(ia + 1) % p] + (2 * math.pi if ia + 1 >= p else 0.0)
        nb = ang_out[(ib + 1) % q] + (2 * math.pi if ib + 1 >= q else 0.0)
        if ib < q and (ia >= p or nb <= na):
            tris.append((inner[ia % p], outer[ib % q], outer[(ib + 1) % q]))
            ib += 1
        else:
            tris.append((inner[ia % p], outer[ib % q], inner[(ia + 1) % p]))
            ia += 1
    return tris


def _disk_mesh(n):
    verts = [(0.0, 0.0)]
    rings = [[0]]
    angles = [np.zeros(1)]
    for i in range(1, n + 1):
        k = 6 * i
        ang = 2 * math.pi * np.arange(k) / k
        r = i / n
        start = len(verts)
        verts += [(r * math.cos(a), r * math.sin(a)) for a in ang]
        rings.append(list(range(start, start + k)))
        angles.append(ang)
    r1 = rings[1]
    tris = [(0, r1[j], r1[(j + 1) % 6]) for j in range(6)]
    for i in range(2, n + 1):
        tris += _zip_rings(rings[i - 1], rings[i], angles[i - 1], angles[i])
    verts = np.array(verts)
    tris = np.array(tris)
    p = verts[tris]
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    neg = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0] < 0
    tris[neg] = tris[neg][:, [0, 2, 1]]
    bnd = np.zeros(len(verts), dtype=bool)
    bnd[rings[-1]] = True
    return Mesh(verts, tris, bnd, "disk")


def build_mesh(kind="square", h=0.1) -> Mesh:
    """Triangulate the unit square ``(0,1)^2`` or the unit disk with target size ``h``.

    The square uses ``ceil(1/h)`` cells per side, each split along an
    alternating diagonal; the disk uses ``ceil(1/h)`` concentric rings with
    ``6 i`` vertices on ring ``i``.
    """
    if not h > 0:
        raise ConfigError("mesh size must be positive")
    n = int(math.ceil(1.0 / h - 1e-12))
    if kind == "square":
        if n < 2:
            raise ConfigError(f"h={h} leaves no interior vertex on the unit square")
        return _square_mesh(n)
    if kind == "disk":
        if n < 1:
            raise ConfigError(f"h={h} too large for the unit disk")
        return _disk_mesh(n)
    raise ConfigError(f"unknown domain kind {kind!r}")


@dataclass(frozen=True)
class CoefficientSample:
    """Transformed-equation coefficients at the quadrature points of one stage.

    Arrays have shape ``(m, q, ...)``, matching ``Mesh.quadrature_points``.
    """

    t: float
    T: np.ndarray
    J: np.ndarray
    Jinv: np.ndarray
    DTinv: np.ndarray
    Md: np.ndarray
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    grad_Jinv: np.ndarray
    velocity: np.ndarray

    @classmethod
    def from_snapshot(cls, snap: FlowSnapshot, shape):
        """Build from flow data at points ordered like ``shape = (m, q)``."""
        DT = snap.DT
        J = det2(DT)
        if not np.all(np.isfinite(J)):
            bad = int(np.nonzero(~np.isfinite(J))[0][0])
            raise NumericalError(f"non-finite Jacobian at quadrature point {bad} (t={snap.t:.6g})")
        DTinv = inv2(DT)
        Md = matmul2(DTinv, np.swapaxes(DTinv, -1, -2))
        A = J[..., None, None] * Md
        c = -matvec2(DTinv, snap.dTdt)
        b = matvec2(A, snap.grad_Jinv) + c
        for name, arr in (("M_d", Md), ("b", b)):
            if not np.all(np.isfinite(arr)):
                bad = int(np.nonzero(~np.isfinite(arr.reshape(len(arr), -1)).all(axis=1))[0][0])
                raise NumericalError(f"non-finite {name} at quadrature point {bad} (t={snap.t:.6g})")
        m, q = shape
        r = lambda a: a.reshape((m, q) + a.shape[1:])  # noqa: E731
        return cls(snap.t, r(snap.T), r(J), r(1.0 / J), r(DTinv), r(Md), r(A), r(b), r(c),
                   r(snap.grad_Jinv), r(snap.dTdt))

    def peclet(self, mesh):
        """Max mesh Peclet number ``|b| h_K / (2 lambda_min(M_d))``."""
        a, b, d = self.Md[..., 0, 0], self.Md[..., 0, 1], self.Md[..., 1, 1]
        lam = 0.5 * (a + d - np.sqrt((a - d) ** 2 + 4 * b * b))
        hk = np.sqrt(2.0 * mesh.areas)[:, None]
        return float(np.max(np.linalg.norm(self.b, axis=-1) * hk / (2.0 * lam)))


def eval_coefficients(flow: FlowRealization, t, mesh: Mesh) -> CoefficientSample:
    """Coefficients at time ``t``, linearly interpolated between stored flow stages.

    ``flow`` must have been computed at ``mesh.quadrature_points()`` flattened.
    """
    times = flow.times
    if t < times[0] - 1e-14 or t > times[-1] + 1e-14:
        raise ConfigError(f"time {t} outside the flow grid")
    k = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
    theta = (t - times[k]) / (times[k + 1] - times[k])
    snap = flow.snapshot(k).interpolate(flow.snapshot(k + 1), float(np.clip(theta, 0.0, 1.0)))
    pts, _ = mesh.quadrature_points()
    return CoefficientSample.from_snapshot(snap, pts.shape[:2])


@dataclass(frozen=True)
class Forcing:
    """Right-hand side ``(f, phi) + (q, grad phi)`` of the standard form.

    ``source(t, y, coeffs)`` returns ``f`` at reference points ``y`` of shape
    ``(m, q, 2)``; the optional ``flux`` returns ``q`` with a trailing
    dimension 2.  ``coeffs`` is the :class:`CoefficientSample` of the stage,
    so manufactured data can depend on the sample.
    """

    source: Callable | None = None
    flux: Callable | None = None

    @classmethod
    def from_function(cls, func):
        """Wrap a plain ``func(t, y)`` already pulled back to the reference domain."""
        return cls(source=lambda t, y, coeffs: func(t, y))

    @property
    def is_zero(self):
        return self.source is None and self.flux is None


@dataclass
class TransformedSystem:
    """Interior-dof matrices and load of one stage."""

    t: float
    mass: sparse.csr_matrix
    stiffness: sparse.csr_matrix
    advection: sparse.csr_matrix
    load: np.ndarray
    form: str

    @property
    def operator(self):
        return self.stiffness + self.advection

    def dump(self, path, interior):
        """Write every matrix as ``name,row,col,value`` triplets (vertex ids)."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("matrix,row,col,value\n")
            for name in ("mass", "stiffness", "advection"):
                coo = getattr(self, name).tocoo()
                order = np.lexsort((coo.col, coo.row))
                for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
                    fh.write(f"{name},{int(interior[r])},{int(interior[c])},{v:.17g}\n")
            for r, v in enumerate(self.load):
                fh.write(f"load,{int(interior[r])},-1,{v:.17g}\n")


def assemble(mesh: Mesh, coeffs: CoefficientSample, form="standard", forcing: Forcing | None = None,
             mass=True) -> TransformedSystem:
    """Assemble mass, diffusion, advection and load on interior dofs.

    ``form="standard"`` uses unit mass weight, ``M_d`` and ``b``;
    ``form="weighted"`` uses ``J``-weighted mass, ``A`` and ``J c``.
    With ``mass=False`` the (time independent) standard mass is taken from
    the mesh cache.
    """
    if form not in FORMS:
        raise ConfigError(f"unknown form {form!r}; expected one of {FORMS}")
    bary, _ = quadrature_rule(2)
    _, w = mesh.quadrature_points()
    grads = mesh.gradients
    pat = mesh.pattern
    if form == "standard":
        diff, adv, wt = coeffs.Md, coeffs.b, None
    else:
        diff, adv, wt = coeffs.A, coeffs.J[..., None] * coeffs.c, coeffs.J
    gT = np.swapaxes(grads, 1, 2)
    dbar = np.sum(w[..., None, None] * diff, axis=1)
    ke = grads @ dbar @ gT
    be = bary.T @ ((w[..., None] * adv) @ gT)
    if form == "standard" and not mass:
        M = mesh.reference_matrices()[0]
    else:
        ww = w if wt is None else w * wt
        me = (bary.T[None] * ww[:, None, :]) @ bary
        M = pat.matrix(me)
    load = assemble_load(mesh, coeffs, forcing, form)
    return TransformedSystem(coeffs.t, M, pat.matrix(ke), pat.matrix(be), load, form)


def assemble_load(mesh: Mesh, coeffs: CoefficientSample, forcing: Forcing | None, form="standard"):
    """Load vector on interior dofs.

    The weighted form tests the standard equation with ``J phi``, so a flux
    ``q`` contributes ``(J q, grad phi) - (J^2 q . grad J^{-1}, phi)``.
    """
    if forcing is None or forcing.is_zero:
        return np.zeros(mesh.n_interior)
    bary, _ = quadrature_rule(2)
    pts, w = mesh.quadrature_points()
    weight = np.ones_like(w) if form == "standard" else coeffs.J
    fe = np.zeros((len(w), 3))
    if forcing.source is not None:
        f = np.asarray(forcing.source(coeffs.t, pts, coeffs), dtype=float)
        fe += np.einsum("qi,mq->mi", bary, w * weight * f)
    if forcing.flux is not None:
        q = np.asarray(forcing.flux(coeffs.t, pts, coeffs), dtype=float)
        fe += np.einsum("mq,mqa,mia->mi", w * weight, q, mesh.gradients)
        if form == "weighted":
            corr = coeffs.J**2 * np.einsum("mqa,mqa->mq", q, coeffs.grad_Jinv)
            fe -= np.einsum("qi,mq->mi", bary, w * corr)
    if not np.all(np.isfinite(fe)):
        raise NumericalError("non-finite load vector")
    return mesh.pattern.vector(fe)
