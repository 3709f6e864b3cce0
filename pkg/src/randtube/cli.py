"""Command-line front end.

Subcommands: ``run-heat``, ``run-mc``, ``verify-flow``, ``verify-moments``,
``mms``, ``stokes-check``.  Every run writes ``report.json``; exit status is
0 on success, 2 for configuration errors, 3 for numerical failures and 4
when a checked criterion fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import replace

import numpy as np
import scipy

from . import __version__
from .assembler import build_mesh
from .config import RunConfig
from .constants import poincare_constant
from .errors import ConfigError, NumericalError
from .fields import sample_field
from .flow import flow_checks, integrate_flow, rk_order, write_boundary_csv
from .solver import (fitted_slope, oscillating_solution, solve_pathwise, spatial_study, temporal_study)
from .stokes import (IdentityMap, QuadraticDilation, RotationMap, StokesData, StreamField, TrigPressure,
                     divergence_defect, inverse_piola, piola_function, pressure_term,
                     stokes_residual)
from .uq import (apriori_ratio, fmt, lp_experiment, nested_max_repetitions, run_ensemble, verify_apriori)

logger = logging.getLogger("randtube")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_CRITERION = 0, 2, 3, 4


def _clean(obj):
    """JSON-safe copy with floats rounded through the shared formatter."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return float(fmt(x)) if math.isfinite(x) else str(x)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def write_report(out, command, cfg: RunConfig, criteria, results, seeds=None):
    report = {
        "command": command,
        "config_sha256": cfg.digest(),
        "config": cfg.to_ini(),
        "seeds": seeds if seeds is not None else [cfg.seed],
        "versions": {"randtube": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": sys.version.split()[0]},
        "criteria": criteria,
        "passed": all(c["pass"] for c in criteria.values()),
        "results": results,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(_clean(report), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report["passed"]


def _criterion(value, passed, detail=""):
    return {"value": value, "pass": bool(passed), "detail": detail}


# --- subcommands --------------------------------------------------------------


def cmd_run_heat(cfg: RunConfig, out, args):
    ens = cfg.ensemble()
    mesh = ens.mesh()
    cp = poincare_constant(mesh)
    real = sample_field(cfg.model, cfg.seed)
    last = round(cfg.model.tau / cfg.dt) - 1

    def dump(k, system):
        if k in (0, last):
            system.dump(os.path.join(out, f"matrices_{cfg.seed}_step{k:06d}.csv"), mesh.interior)
    stride = cfg.snapshot_stride if cfg.snapshot_stride > 0 else "final"
    sol = solve_pathwise(mesh, real, ens.forcing(), ens.initial(), cfg.theta, cfg.dt, cfg.model.tau, cfg.form,
                         store=stride, C_P=cp, C_M=cfg.C_M,
                         dump_hook=dump if args.dump_matrices else None)
    with open(os.path.join(out, f"trajectory_{cfg.seed}.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["vertex", "x", "y", "time", "value"])
        for t, u in zip(sol.snapshot_times, sol.trajectory):
            for v, (x, y) in enumerate(mesh.vertices):
                w.writerow([v, fmt(x), fmt(y), fmt(t), fmt(u[v])])
    bidx = np.nonzero(mesh.boundary)[0]
    flow = integrate_flow(real, mesh.vertices[bidx], sol.times)
    write_boundary_csv(os.path.join(out, f"boundary_{cfg.seed}.csv"), flow, range(len(bidx)),
                       stride=max(1, len(sol.times) // 20))
    ratio = apriori_ratio(sol.norms, sol.constants)
    results = {"norms": sol.norms, "constants": sol.constants.to_dict(), "peclet_max": sol.peclet_max,
               "final_L2": math.sqrt(float(sol.final[mesh.interior] @ (mesh.reference_matrices()[0]
                                                                      @ sol.final[mesh.interior])))}
    criteria = {"apriori_ratio": _criterion(ratio, ratio <= 1.0, "discrete W-norm over C times data norm")}
    if cfg.model.kind == "zero" and cfg.source == 0.0 and cfg.u0 == "mode" and cfg.domain == "square":
        expected = math.exp(-2 * math.pi**2 * cfg.model.tau) * math.sqrt(sol.norms["u0_L2_sq"])
        rel = abs(results["final_L2"] / expected - 1.0)
        criteria["heat_decay"] = _criterion(rel, rel <= 0.02, "relative deviation from exp(-2 pi^2 t)")
    return write_report(out, "run-heat", cfg, criteria, results)


def cmd_run_mc(cfg: RunConfig, out, args):
    ens = cfg.ensemble()
    res = run_ensemble(ens, cfg.samples, cfg.seed, args.workers)
    res.moments.write_csv(os.path.join(out, "moments.csv"))
    res.write_constants_csv(os.path.join(out, "constants.csv"))
    ap = verify_apriori(res.results)
    criteria = {
        "apriori_pass_fraction": _criterion(ap["pass_fraction"], ap["pass_fraction"] >= 0.99),
        "power_mean_monotone": _criterion(res.report.power_mean_monotone(), res.report.power_mean_monotone()),
    }
    results = {"moment_report": res.report.to_dict(), "apriori": ap, "accepted": res.moments.count,
               "rejected": res.moments.rejected}
    return write_report(out, "run-mc", cfg, criteria, results,
                        seeds=list(range(cfg.seed, cfg.seed + cfg.samples)))


def cmd_verify_flow(cfg: RunConfig, out, args):
    mesh = build_mesh(cfg.domain, cfg.h)
    real = sample_field(cfg.model, cfg.seed)
    times = np.linspace(0.0, cfg.model.tau, round(cfg.model.tau / cfg.dt) + 1)
    flow, checks = flow_checks(real, mesh.vertices, times)
    bidx = np.nonzero(mesh.boundary)[0]
    write_boundary_csv(os.path.join(out, f"boundary_{cfg.seed}.csv"), flow, bidx,
                       stride=max(1, len(times) // 20))
    criteria = {
        "inverse_defect": _criterion(checks["inverse"], checks["inverse"] <= 1e-6),
        "DT_DTinv": _criterion(checks["DT_DTinv"], checks["DT_DTinv"] <= 1e-8),
        "det_vs_singular_values": _criterion(checks["det_vs_sv"], checks["det_vs_sv"] <= 1e-10),
        "singular_value_sandwich": _criterion(checks["sandwich"], checks["sandwich"]),
    }
    if math.isfinite(checks["analytic"]):
        tol = 1e-7 if cfg.model.kind == "lognormal" else 1e-8
        criteria["analytic_flow"] = _criterion(checks["analytic"], checks["analytic"] <= tol)
    if cfg.model.kind == "affine_tube":
        errs, slope = rk_order(real, mesh.vertices, cfg.model.tau)
        criteria["rk_order"] = _criterion(slope, abs(slope - 4.0) <= 0.3)
        checks["rk_errors"] = errs
    return write_report(out, "verify-flow", cfg, criteria, checks)


def cmd_verify_moments(cfg: RunConfig, out, args):
    model = cfg.model
    if model.kind != "lognormal":
        raise ConfigError("verify-moments needs the lognormal model")
    lp = lp_experiment(model, cfg.moments_samples, cfg.seed, cfg.moments_flow_dt, cfg.p_moments)
    with open(os.path.join(out, "constants.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "C_D", "B_tau"])
        for i, (cd, b) in enumerate(zip(lp["C_D"], lp["B_tau"])):
            w.writerow([cfg.seed + i, fmt(cd), fmt(b)])
    nested = nested_max_repetitions(model, cfg.moments_repetitions, base_seed=cfg.seed,
                                    dt=cfg.moments_flow_dt)
    criteria = {f"lp_lower_bound_p{r['p']}": _criterion(r["lp_norm"], r["pass"], f"bound {r['lower_bound']}")
                for r in lp["rows"]}
    need = math.ceil(0.95 * nested["repetitions"])
    criteria["nested_max_strict"] = _criterion(nested["strict_count"], nested["strict_count"] >= need,
                                               f"of {nested['repetitions']} repetitions")
    results = {"sigma2_hat": lp["sigma2_hat"], "lp_table": lp["rows"],
               "nested_max_first_run": nested["runs"][0], "strict_count": nested["strict_count"],
               "all_non_decreasing": nested["all_non_decreasing"]}
    return write_report(out, "verify-moments", cfg, criteria, results)


def cmd_mms(cfg: RunConfig, out, args):
    real = sample_field(replace(cfg.model, tau=cfg.mms_tau), cfg.seed)
    space = spatial_study(real, cfg.mms_spatial, cfg.mms_tau, 1.0, domain=cfg.domain)
    timer = temporal_study(real, cfg.mms_temporal, cfg.mms_tau, cfg.mms_fine, 1.0, oscillating_solution(),
                           domain=cfg.domain)
    with open(os.path.join(out, "mms_table.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["study", "h", "dt", "L2_err", "H1_err"])
        for name, rows in (("space", space), ("time", timer)):
            for r in rows:
                w.writerow([name] + [fmt(v) for v in r])
    s_slope = fitted_slope([r[0] for r in space], [r[2] for r in space])
    t_slope = fitted_slope([r[1] for r in timer], [r[2] for r in timer])
    criteria = {"spatial_L2_order": _criterion(s_slope, abs(s_slope - 2.0) <= 0.2),
                "temporal_L2_order": _criterion(t_slope, abs(t_slope - 1.0) <= 0.2)}
    results = {"space": space, "time": timer,
               "spatial_H1_order": fitted_slope([r[0] for r in space], [r[3] for r in space])}
    return write_report(out, "mms", cfg, criteria, results)


def stokes_suite(seed, pairs=50, n_quad=16, t=0.7):
    """Divergence, pressure-annihilation, round-trip and residual checks."""
    rng = np.random.default_rng(seed)
    rot = RotationMap.random(seed)

    def u(z):
        return np.stack([-3 * np.sin(2 * z[..., 0]) * np.sin(3 * z[..., 1]),
                         -2 * np.cos(2 * z[..., 0]) * np.cos(3 * z[..., 1])], -1)

    def du(z):
        x, y = z[..., 0], z[..., 1]
        r0 = np.stack([-6 * np.cos(2 * x) * np.sin(3 * y), -9 * np.sin(2 * x) * np.cos(3 * y)], -1)
        r1 = np.stack([4 * np.sin(2 * x) * np.cos(3 * y), 6 * np.cos(2 * x) * np.sin(3 * y)], -1)
        return np.stack([r0, r1], -2)

    probes = rng.uniform(0.05, 0.95, (200, 2))
    rows = []
    div_rot = divergence_defect(u, du, rot, t, probes)
    div_comp = divergence_defect(u, du, QuadraticDilation(0.5), t, probes)
    rt = float(np.max(np.abs(inverse_piola(piola_function(u, rot, t), rot, t, rot.value(t, probes))
                             - u(rot.value(t, probes)))))
    worst_p = 0.0
    for k in range(pairs):
        p = TrigPressure.random(rng)
        v = StreamField.bubble(rng)
        val = pressure_term(lambda s, y: p(y), v, rot, t, n_quad)
        worst_p = max(worst_p, abs(val))
        rows.append(("pressure", k, val))
    sf, p = StreamField.bubble(rng), TrigPressure.random(rng)
    data = StokesData(lambda s, x: sf(x), lambda s, x: p(x), lambda s, x: -sf.laplacian(x) + p.gradient(x),
                      lambda s, x: 0.0 * x)
    res_id = stokes_residual(data, StreamField.bubble(rng), IdentityMap(), t, n_quad)
    rows.append(("identity_residual", 0, res_id))
    return {"rotation_divergence_defect": div_rot, "compressible_divergence_defect": div_comp,
            "piola_round_trip": rt, "pressure_term_max": worst_p, "identity_residual": res_id,
            "rotation_angle": rot.angle}, rows


def cmd_stokes_check(cfg: RunConfig, out, args):
    summary, rows = stokes_suite(cfg.seed, cfg.stokes_pairs, cfg.stokes_quadrature)
    with open(os.path.join(out, "stokes_residuals.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "index", "value"])
        for name, k, val in rows:
            w.writerow([name, k, fmt(val)])
    criteria = {
        "rotation_divergence": _criterion(summary["rotation_divergence_defect"],
                                          summary["rotation_divergence_defect"] <= 1e-6),
        "pressure_annihilation": _criterion(summary["pressure_term_max"], summary["pressure_term_max"] <= 1e-8),
        "piola_round_trip": _criterion(summary["piola_round_trip"], summary["piola_round_trip"] <= 1e-8),
        "identity_residual": _criterion(summary["identity_residual"], abs(summary["identity_residual"]) <= 1e-8),
    }
    return write_report(out, "stokes-check", cfg, criteria, summary)


COMMANDS = {
    "run-heat": cmd_run_heat,
    "run-mc": cmd_run_mc,
    "verify-flow": cmd_verify_flow,
    "verify-moments": cmd_verify_moments,
    "mms": cmd_mms,
    "stokes-check": cmd_stokes_check,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="randtube", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="INI configuration file (defaults are used when omitted)")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the configured base seed")
    parser.add_argument("--workers", type=int, default=1, help="parallel sample workers")
    parser.add_argument("--dump-matrices", action="store_true", help="write assembled matrices as triplets")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        cfg = cfg.with_seed(args.seed)
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        os.makedirs(args.out, exist_ok=True)
        passed = COMMANDS[args.command](cfg, args.out, args)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    if not passed:
        logger.error("at least one criterion failed; see %s", os.path.join(args.out, "report.json"))
        return EXIT_CRITERION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
