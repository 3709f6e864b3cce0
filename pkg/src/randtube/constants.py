"""Path-wise constants of a flow realization and the a priori constant.

With grid maxima over the stored space-time points,

    C_T = max(|T|, |T^{-1}|),  C_D = max(|DT|, |DT^{-1}|),
    C_t = max |dT/dt|,         C_J = max |grad J^{-1}|,

the ledger is

    sigma_hi = C_D,  sigma_lo = 1 / C_D,
    alpha = 1 / (2 sigma_hi^2 (1 + C_P^2)),
    k0    = 2 sigma_hi^2 (C_D C_t + C_J sigma_hi^d sigma_lo^2),
    C1    = sigma_lo^2 (1 + C_J sigma_hi^d) + C_D C_t,
    C_L   = C1 + k0,
    frak  = max(2 (1 + C_M) / alpha, 1 / alpha^2),
    C     = 2 (C_L frak + 1) + frak.

Matrix norms are spectral norms.  The realized maximum of ``|M_d|`` is kept
alongside ``C1`` for comparison with its diffusion part.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .errors import NumericalError
from .flow import FlowRealization, FlowSnapshot, singular_values2

LEDGER_FIELDS = ("C_T", "C_D", "C_t", "C_J", "sigma_lo", "sigma_hi", "C_P", "C_M",
                 "alpha", "k0", "C1", "C_L", "frak_C", "C")


@dataclass(frozen=True)
class PathConstants:
    C_T: float
    C_D: float
    C_t: float
    C_J: float
    sigma_lo: float
    sigma_hi: float
    C_P: float
    C_M: float
    alpha: float
    k0: float
    C1: float
    C_L: float
    frak_C: float
    C: float
    dimension: int = 2
    max_diffusion_norm: float = 1.0
    refinement_delta: dict = field(default_factory=dict)

    @classmethod
    def from_maxima(cls, C_T, C_D, C_t, C_J, C_P, C_M=1.0, dimension=2, max_diffusion_norm=None,
                    refinement_delta=None):
        """Evaluate the ledger formulas from the four grid maxima."""
        d = dimension
        s_hi = C_D
        s_lo = 1.0 / C_D
        try:
            alpha = 1.0 / (2.0 * s_hi**2 * (1.0 + C_P**2))
            k0 = 2.0 * s_hi**2 * (C_D * C_t + C_J * s_hi**d * s_lo**2)
            C1 = s_lo**2 * (1.0 + C_J * s_hi**d) + C_D * C_t
            C_L = C1 + k0
            frak = max(2.0 * (1.0 + C_M) / alpha, 1.0 / alpha**2)
            C = 2.0 * (C_L * frak + 1.0) + frak
        except (OverflowError, ZeroDivisionError) as exc:
            raise NumericalError(f"a priori constant overflows (C_D={C_D:.3g})") from exc
        if not math.isfinite(C):
            raise NumericalError("a priori constant is not finite")
        return cls(C_T, C_D, C_t, C_J, s_lo, s_hi, C_P, C_M, alpha, k0, C1, C_L, frak, C, d,
                   C_D**2 if max_diffusion_norm is None else max_diffusion_norm,
                   dict(refinement_delta or {}))

    def identity_defects(self):
        """Absolute defects of the seven ledger identities (zero by construction)."""
        d = self.dimension
        frak = max(2 * (1 + self.C_M) / self.alpha, 1 / self.alpha**2)
        return {
            "sigma": abs(self.sigma_hi - self.C_D) + abs(self.sigma_lo - 1 / self.C_D),
            "alpha": abs(self.alpha - 1 / (2 * self.sigma_hi**2 * (1 + self.C_P**2))),
            "k0": abs(self.k0 - 2 * self.sigma_hi**2 * (self.C_D * self.C_t
                                                        + self.C_J * self.sigma_hi**d * self.sigma_lo**2)),
            "C1": abs(self.C1 - (self.sigma_lo**2 * (1 + self.C_J * self.sigma_hi**d) + self.C_D * self.C_t)),
            "C_L": abs(self.C_L - (self.C1 + self.k0)),
            "frak_C": abs(self.frak_C - frak),
            "C": abs(self.C - (2 * (self.C_L * self.frak_C + 1) + self.frak_C)),
        }

    def row(self):
        """Ledger values in :data:`LEDGER_FIELDS` order plus the diffusion-norm maximum."""
        return [getattr(self, f) for f in LEDGER_FIELDS] + [self.max_diffusion_norm]

    def to_dict(self):
        return asdict(self)


class ConstantsAccumulator:
    """Running grid maxima over flow snapshots.

    Maxima over even-indexed snapshots are tracked as well; their gap to
    the full maxima is the refinement delta reported with the ledger.
    """

    KEYS = ("C_T", "C_D", "C_t", "C_J", "Md")

    def __init__(self):
        self.full = dict.fromkeys(self.KEYS, 0.0)
        self.coarse = dict.fromkeys(self.KEYS, 0.0)
        self.count = 0

    def update(self, snap: FlowSnapshot, points):
        smax, smin = singular_values2(snap.DT)
        vals = {
            "C_T": max(float(np.max(np.linalg.norm(snap.T, axis=-1))),
                       float(np.max(np.linalg.norm(points, axis=-1)))),
            "C_D": max(float(np.max(smax)), float(np.max(1.0 / smin))),
            "C_t": float(np.max(np.linalg.norm(snap.dTdt, axis=-1))),
            "C_J": float(np.max(np.linalg.norm(snap.grad_Jinv, axis=-1))),
            "Md": float(np.max(1.0 / smin**2)),
        }
        for k, v in vals.items():
            self.full[k] = max(self.full[k], v)
            if self.count % 2 == 0:
                self.coarse[k] = max(self.coarse[k], v)
        self.count += 1

    def finalize(self, C_P, C_M=1.0, dimension=2) -> PathConstants:
        if self.count == 0:
            raise NumericalError("no flow snapshots were accumulated")
        f = self.full
        delta = {k: f[k] - self.coarse[k] for k in ("C_T", "C_D", "C_t", "C_J")}
        return PathConstants.from_maxima(f["C_T"], f["C_D"], f["C_t"], f["C_J"], C_P, C_M, dimension,
                                         max_diffusion_norm=f["Md"], refinement_delta=delta)


def compute_constants(flow: FlowRealization, C_P, C_M=1.0) -> PathConstants:
    """Ledger of a stored flow; suprema are maxima over its space-time grid."""
    acc = ConstantsAccumulator()
    for snap in flow.snapshots():
        acc.update(snap, flow.points)
    return acc.finalize(C_P, C_M)


def poincare_constant(mesh, tol=1e-10, maxiter=10000):
    """``1 / sqrt(lambda_1)`` of the discrete Dirichlet Laplacian by inverse iteration."""
    M, K = mesh.reference_matrices()
    n = K.shape[0]
    if n == 0:
        raise NumericalError("mesh has no interior vertices")
    lu = spla.splu(sparse.csc_matrix(K))
    x = np.ones(n)
    lam = float(x @ (K @ x)) / float(x @ (M @ x))
    for _ in range(maxiter):
        y = lu.solve(M @ x)
        y /= math.sqrt(float(y @ (M @ y)))
        new = float(y @ (K @ y))
        x = y
        if abs(new - lam) <= tol * new:
            return 1.0 / math.sqrt(new)
        lam = new
    raise NumericalError(f"inverse iteration did not converge in {maxiter} steps (lambda ~ {lam})")
