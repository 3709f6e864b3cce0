"""Monte Carlo ensembles over velocity samples and their statistical checks."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .assembler import Forcing, Mesh, build_mesh
from .brownian import mollified_batch
from .constants import LEDGER_FIELDS, PathConstants, poincare_constant
from .errors import ConfigError, NumericalError, SampleRejected
from .fields import ModelConfig, sample_field
from .flow import FlowStepper
from .solver import solve_pathwise, time_grid

logger = logging.getLogger(__name__)

P_LIST = (1, 2, 4, 8)
NESTED = (100, 1000, 10000)


def fmt(x):
    """Round-trip float formatting used in every output file."""
    return format(float(x), ".17g")


# --- aggregation -------------------------------------------------------------


@dataclass
class MomentField:
    """Welford mean/M2 and power sums of nodal values at fixed times."""

    times: np.ndarray
    n_vertices: int
    p_list: tuple = P_LIST
    count: int = 0
    rejected: int = 0
    mean: np.ndarray = None
    m2: np.ndarray = None
    psums: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = (len(self.times), self.n_vertices)
        if self.mean is None:
            self.mean = np.zeros(shape)
            self.m2 = np.zeros(shape)
            self.psums = {p: np.zeros(shape) for p in self.p_list}

    def update(self, values):
        values = np.asarray(values, dtype=float)
        self.count += 1
        delta = values - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (values - self.mean)
        for p in self.p_list:
            self.psums[p] += np.abs(values) ** p

    @property
    def variance(self):
        if self.count < 2:
            return np.zeros_like(self.m2)
        return np.maximum(self.m2 / (self.count - 1), 0.0)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["vertex", "time", "mean", "var"] + [f"psum_{p}" for p in self.p_list])
            var = self.variance
            for k, t in enumerate(self.times):
                for v in range(self.n_vertices):
                    w.writerow([v, fmt(t), fmt(self.mean[k, v]), fmt(var[k, v])]
                               + [fmt(self.psums[p][k, v]) for p in self.p_list])


def welford(values):
    """Mean and unbiased variance of a 1-d sample by Welford's update."""
    mean = m2 = 0.0
    n = 0
    for x in values:
        n += 1
        d = x - mean
        mean += d / n
        m2 += d * (x - mean)
    return mean, (m2 / (n - 1) if n > 1 else 0.0)


def empirical_lp(values, p):
    values = np.asarray(values, dtype=float)
    return float(np.mean(np.abs(values) ** p) ** (1.0 / p))


def nested_max(values, sizes=NESTED):
    """``max(values[:N])`` for each ``N`` in ``sizes`` not exceeding the sample size."""
    values = np.asarray(values, dtype=float)
    return [float(np.max(values[:n])) for n in sizes if n <= len(values)]


@dataclass
class MomentReport:
    """Empirical ``L^p`` norms and nested maxima of every ledger constant."""

    n: int
    lp: dict
    nested: dict
    lower_bound: dict = field(default_factory=dict)

    @classmethod
    def from_ledger(cls, ledgers, p_list=P_LIST, sizes=NESTED, sigma2=None):
        cols = {name: [getattr(c, name) for c in ledgers] for name in LEDGER_FIELDS}
        lp = {name: {str(p): empirical_lp(v, p) for p in p_list} for name, v in cols.items()}
        nested = {name: nested_max(v, sizes) for name, v in cols.items()}
        bound = {}
        if sigma2 is not None:
            bound = {str(p): math.exp(sigma2 * p / 2.0) for p in p_list}
        return cls(len(ledgers), lp, nested, bound)

    def power_mean_monotone(self, rtol=1e-12):
        ok = True
        for vals in self.lp.values():
            seq = [vals[k] for k in sorted(vals, key=float)]
            ok &= all(b >= a * (1 - rtol) for a, b in zip(seq, seq[1:]))
        return bool(ok)

    def to_dict(self):
        return {"n": self.n, "lp": self.lp, "nested_max": self.nested, "lower_bound": self.lower_bound}


# --- ensembles ---------------------------------------------------------------


@dataclass(frozen=True)
class EnsembleConfig:
    """Everything one path-wise solve needs besides the seed."""

    model: ModelConfig = ModelConfig()
    domain: str = "square"
    h: float = 1 / 16
    dt: float = 1 / 50
    theta: float = 1.0
    form: str = "standard"
    source: float = 1.0
    u0: str = "mode"
    snapshot_stride: int = 0
    C_M: float = 1.0

    @property
    def tau(self):
        return self.model.tau

    def mesh(self) -> Mesh:
        return build_mesh(self.domain, self.h)

    def forcing(self):
        if self.source == 0.0:
            return None
        amp = float(self.source)
        # deterministic f on the physical domain, pulled back through T
        return Forcing(source=lambda t, y, c: amp * np.ones(c.T.shape[:-1]))

    def initial(self):
        if self.u0 == "zero":
            return lambda y: np.zeros(len(y))
        if self.u0 == "mode":
            if self.domain == "square":
                return lambda y: np.sin(np.pi * y[:, 0]) * np.sin(np.pi * y[:, 1])
            return lambda y: np.maximum(1.0 - np.sum(y**2, axis=1), 0.0)
        raise ConfigError(f"unknown initial value {self.u0!r}")

    def snapshot_times(self):
        times = time_grid(self.tau, self.dt)
        if self.snapshot_stride <= 0:
            return times[-1:]
        idx = list(range(0, len(times), self.snapshot_stride))
        if idx[-1] != len(times) - 1:
            idx.append(len(times) - 1)
        return times[idx]


@dataclass
class SampleResult:
    seed: int
    status: str
    reason: str = ""
    constants: PathConstants | None = None
    norms: dict = field(default_factory=dict)
    snapshots: np.ndarray | None = None
    ratio: float = float("nan")


_MESH_CACHE = {}


def _mesh_and_cp(cfg: EnsembleConfig):
    key = (cfg.domain, cfg.h)
    if key not in _MESH_CACHE:
        mesh = cfg.mesh()
        _MESH_CACHE[key] = (mesh, poincare_constant(mesh))
    return _MESH_CACHE[key]


def apriori_ratio(norms, constants: PathConstants):
    """``|u|^2_W / (C (|f|^2_{L^2(H^-1)} + |u0|^2))``; 0 when the data vanish."""
    num = norms["L2H1_sq"] + norms["dual_dudt_sq"]
    den = constants.C * (norms["dual_f_sq"] + norms["u0_L2_sq"])
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


def run_sample(cfg: EnsembleConfig, seed: int) -> SampleResult:
    """Solve one sample; flow-hypothesis violations become a rejected result."""
    mesh, cp = _mesh_and_cp(cfg)
    try:
        real = sample_field(cfg.model, seed)
        stride = cfg.snapshot_stride if cfg.snapshot_stride > 0 else "final"
        sol = solve_pathwise(mesh, real, cfg.forcing(), cfg.initial(), cfg.theta, cfg.dt, cfg.tau,
                             cfg.form, store=stride, C_P=cp, C_M=cfg.C_M)
    except SampleRejected as exc:
        logger.warning("sample %d rejected: %s", seed, exc)
        return SampleResult(seed, "rejected", exc.reason or str(exc))
    return SampleResult(seed, "ok", "", sol.constants, dict(sol.norms), sol.trajectory,
                        apriori_ratio(sol.norms, sol.constants))


def _run_chunk(args):
    cfg, seeds = args
    return [run_sample(cfg, s) for s in seeds]


def map_samples(cfg: EnsembleConfig, seeds, workers=1):
    """Results in seed order; worker count does not affect any value."""
    seeds = [int(s) for s in seeds]
    if workers <= 1 or len(seeds) < 2:
        return [run_sample(cfg, s) for s in seeds]
    chunk = max(1, len(seeds) // (4 * workers))
    parts = [(cfg, seeds[i:i + chunk]) for i in range(0, len(seeds), chunk)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        out = []
        for res in pool.map(_run_chunk, parts):
            out.extend(res)
    return out


@dataclass
class EnsembleResult:
    moments: MomentField
    results: list
    report: MomentReport

    @property
    def ledgers(self):
        return [r.constants for r in self.results if r.status == "ok"]

    def write_constants_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seed", "status", "reason"] + list(LEDGER_FIELDS)
                       + ["max_diffusion_norm", "wnorm_sq", "data_norm_sq", "ratio"])
            for r in self.results:
                if r.status != "ok":
                    w.writerow([r.seed, r.status, r.reason] + [""] * (len(LEDGER_FIELDS) + 4))
                    continue
                num = r.norms["L2H1_sq"] + r.norms["dual_dudt_sq"]
                den = r.norms["dual_f_sq"] + r.norms["u0_L2_sq"]
                w.writerow([r.seed, r.status, ""] + [fmt(v) for v in r.constants.row()]
                           + [fmt(num), fmt(den), fmt(r.ratio)])


def run_ensemble(cfg: EnsembleConfig, n, base_seed=0, workers=1) -> EnsembleResult:
    """Run samples ``base_seed + i``, ``i < n``, and aggregate in seed order."""
    if n < 1:
        raise NumericalError("ensemble size must be at least 1")
    mesh, _ = _mesh_and_cp(cfg)
    results = map_samples(cfg, range(base_seed, base_seed + n), workers)
    moments = MomentField(cfg.snapshot_times(), mesh.n_vertices)
    for r in results:
        if r.status == "ok":
            moments.update(r.snapshots)
        else:
            moments.rejected += 1
    if moments.count == 0:
        raise NumericalError(f"all {n} samples were rejected")
    ledgers = [r.constants for r in results if r.status == "ok"]
    return EnsembleResult(moments, results, MomentReport.from_ledger(ledgers))


def verify_apriori(results, threshold=1.0):
    """Fraction of accepted samples with ratio at most ``threshold``, worst ratio, failures."""
    ok = [r for r in results if r.status == "ok"]
    if not ok:
        return {"pass_fraction": float("nan"), "max_ratio": float("nan"), "failures": []}
    ratios = np.array([r.ratio for r in ok])
    failures = []
    for r in ok:
        if not r.ratio <= threshold:
            logger.warning("a priori bound violated for seed %d: ratio %.6g, ledger %s",
                           r.seed, r.ratio, r.constants.to_dict())
            failures.append({"seed": r.seed, "ratio": r.ratio, "ledger": r.constants.to_dict(),
                             "norms": r.norms})
    return {"pass_fraction": float(np.mean(ratios <= threshold)), "max_ratio": float(np.max(ratios)),
            "n": len(ok), "failures": failures}


def verify_no_uniform_bound(values, sizes=NESTED):
    """Nested maxima of ``values`` and whether any step strictly increased."""
    seq = nested_max(values, sizes)
    strict = any(b > a for a, b in zip(seq, seq[1:]))
    return {"sizes": [n for n in sizes if n <= len(values)], "max": seq, "strict_increase": strict,
            "non_decreasing": all(b >= a for a, b in zip(seq, seq[1:]))}


# --- flow-only moment experiments -------------------------------------------


def flow_constant_CD(model: ModelConfig, seed, dt, points=None):
    """``C_D`` of one sample from the integrated flow, plus ``B^eps_tau`` when available."""
    real = sample_field(model, seed)
    pts = np.array([[1.0, 1.0]]) if points is None else np.asarray(points, dtype=float)
    cd = 1.0
    for snap in FlowStepper(real, pts, time_grid(model.tau, dt)):
        sv = np.linalg.svd(snap.DT, compute_uv=False)
        cd = max(cd, float(np.max(sv[..., 0])), float(np.max(1.0 / sv[..., -1])))
    b_tau = float(real.sample.bm_path.smooth[-1]) if real.sample.bm_path is not None else 0.0
    return cd, b_tau


def lp_experiment(model: ModelConfig, n, base_seed=0, dt=1e-2, p_list=P_LIST):
    """Empirical ``||C_D||_{L^p}`` against ``exp(sigma^2 p / 2)``.

    ``sigma^2`` is the sample variance of ``B^eps_tau`` over the same ensemble.
    """
    cds, bs = [], []
    for i in range(n):
        cd, b = flow_constant_CD(model, base_seed + i, dt)
        cds.append(cd)
        bs.append(b)
    _, sigma2 = welford(bs)
    rows = []
    for p in p_list:
        norm = empirical_lp(cds, p)
        bound = math.exp(sigma2 * p / 2.0)
        rows.append({"p": p, "lp_norm": norm, "lower_bound": bound, "finite": math.isfinite(norm),
                     "pass": bool(math.isfinite(norm) and norm >= bound)})
    return {"n": n, "sigma2_hat": sigma2, "sigma2_path_formula": _mean_path_variance(model),
            "rows": rows, "C_D": cds, "B_tau": bs}


def _mean_path_variance(model: ModelConfig):
    real = sample_field(replace(model, kind="lognormal"), 0)
    return real.sample.bm_path.variance_at_tau


def closed_form_CD(model: ModelConfig, seeds, dt=1e-2):
    """``C_D = exp(max_t |B^eps_t|)`` on the flow grid, for many seeds at once."""
    times = time_grid(model.tau, dt)
    out = []
    step = 2000
    seeds = list(seeds)
    for i in range(0, len(seeds), step):
        b, _ = mollified_batch(seeds[i:i + step], model.tau, model.mollifier, times, model.variance_scale)
        out.append(np.exp(np.max(np.abs(b), axis=1)))
    return np.concatenate(out)


def nested_max_repetitions(model: ModelConfig, repetitions=100, sizes=NESTED, base_seed=0, dt=1e-2):
    """Repeat the nested-maximum experiment on disjoint seed blocks."""
    n = max(sizes)
    reps = []
    for r in range(repetitions):
        cds = closed_form_CD(model, range(base_seed + r * n, base_seed + (r + 1) * n), dt)
        reps.append(verify_no_uniform_bound(cds, sizes))
    strict = sum(1 for r in reps if r["strict_increase"])
    return {"repetitions": repetitions, "strict_count": strict,
            "all_non_decreasing": all(r["non_decreasing"] for r in reps), "runs": reps}
