"""Acceptance criteria; each test records one PASS/FAIL line printed in the terminal summary."""

import math
import time

import numpy as np

from randtube.assembler import build_mesh
from randtube.cli import main, stokes_suite
from randtube.constants import compute_constants, poincare_constant
from randtube.fields import ModelConfig, sample_field
from randtube.flow import flow_checks, integrate_flow, rk_order
from randtube.solver import (NormTools, fitted_slope, form_witnesses, mms_problem, oscillating_solution,
                             solve_pathwise, spatial_study, temporal_study)
from randtube.uq import EnsembleConfig, lp_experiment, map_samples, nested_max_repetitions, verify_apriori

REPORT = []


def record(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {number:2d} {title}: {detail}"
    REPORT.append((number, line))
    print(line)
    return ok


def test_01_heat_decay():
    start = time.perf_counter()
    mesh = build_mesh("square", 1 / 64)
    tau = 0.1
    u0 = lambda y: np.sin(np.pi * y[:, 0]) * np.sin(np.pi * y[:, 1])  # noqa: E731
    sol = solve_pathwise(mesh, sample_field(ModelConfig("zero", tau=tau), 0), None, u0, 1.0, 1e-4, tau,
                         store="final")
    tools = NormTools(mesh)
    ratio = math.sqrt(tools.l2_sq(mesh.restrict(sol.final)) / sol.norms["u0_L2_sq"]) / math.exp(-0.2 * math.pi**2)
    elapsed = time.perf_counter() - start
    ok = abs(ratio - 1) <= 0.02 and elapsed <= 60
    assert record(1, "heat decay", ok, f"|u(0.1)|/(exp(-0.2 pi^2)|u0|) = {ratio:.5f} (tol 2%), {elapsed:.1f} s")


def test_02_mms_orders():
    start = time.perf_counter()
    tau = 0.25
    real = sample_field(ModelConfig("affine_tube", tau=tau), 0)
    space = spatial_study(real, (8, 16, 32, 64), tau)
    timer = temporal_study(real, (40, 80, 160, 320), tau, 64, 1.0, oscillating_solution())
    s = fitted_slope([r[0] for r in space], [r[2] for r in space])
    t = fitted_slope([r[1] for r in timer], [r[2] for r in timer])
    elapsed = time.perf_counter() - start
    ok = abs(s - 2) <= 0.2 and abs(t - 1) <= 0.2 and elapsed <= 300
    assert record(2, "MMS convergence", ok, f"spatial L2 order {s:.3f}, temporal L2 order {t:.3f}, {elapsed:.0f} s")


def test_03_flow_exactness():
    mesh = build_mesh("square", 1 / 16)
    worst = dict(analytic=0.0, DT_DTinv=0.0, det_vs_sv=0.0)
    sandwich, slopes = True, []
    for seed in range(5):
        real = sample_field(ModelConfig("affine_tube"), seed)
        _, chk = flow_checks(real, mesh.vertices, np.linspace(0, 1, 1001))
        for k in worst:
            worst[k] = max(worst[k], chk[k])
        sandwich &= chk["sandwich"]
        slopes.append(rk_order(real, mesh.vertices, 1.0)[1])
    for kind in ("lognormal", "kl"):
        _, chk = flow_checks(sample_field(ModelConfig(kind), 1), mesh.vertices, np.linspace(0, 1, 201))
        worst["DT_DTinv"] = max(worst["DT_DTinv"], chk["DT_DTinv"])
        worst["det_vs_sv"] = max(worst["det_vs_sv"], chk["det_vs_sv"])
        sandwich &= chk["sandwich"]
    ok = (worst["analytic"] <= 1e-8 and all(abs(s - 4) <= 0.3 for s in slopes) and worst["DT_DTinv"] <= 1e-8
          and worst["det_vs_sv"] <= 1e-10 and sandwich)
    assert record(3, "flow exactness", ok,
                  f"analytic {worst['analytic']:.2e}, RK orders {min(slopes):.2f}..{max(slopes):.2f}, "
                  f"DT DT^-1 {worst['DT_DTinv']:.1e}, J-s1s2 {worst['det_vs_sv']:.1e}, sandwich {sandwich}")


def test_04_constants_ledger():
    mesh = build_mesh("square", 1 / 8)
    pts = mesh.vertices
    cp = poincare_constant(build_mesh("square", 1 / 128))
    exact_cp = 1 / (math.pi * math.sqrt(2))
    defects = 0.0
    for kind in ("affine_tube", "lognormal", "kl"):
        for seed in range(3):
            flow = integrate_flow(sample_field(ModelConfig(kind), seed), pts, np.linspace(0, 1, 51), stencil=mesh.h)
            defects = max(defects, max(compute_constants(flow, cp).identity_defects().values()))
    zero = compute_constants(integrate_flow(sample_field(ModelConfig("zero"), 0), pts, np.linspace(0, 1, 11)), cp)
    trivial = (zero.C_D, zero.C_t, zero.C_J, zero.k0) == (1.0, 0.0, 0.0, 0.0)
    rel = abs(cp / exact_cp - 1)
    ok = defects == 0.0 and trivial and rel <= 0.01
    assert record(4, "constants ledger", ok,
                  f"max identity defect {defects:g}, zero-field trivial {trivial}, C_P(1/128) = {cp:.6f} "
                  f"(rel dev {rel:.2e})")


def test_05_moment_experiment():
    start = time.perf_counter()
    model = ModelConfig("lognormal")
    lp = lp_experiment(model, 10000, base_seed=0, dt=0.01)
    nested = nested_max_repetitions(model, 100, base_seed=10**6, dt=0.01)
    elapsed = time.perf_counter() - start
    rows = ", ".join(f"p={r['p']}: {r['lp_norm']:.4f}>={r['lower_bound']:.4f}" for r in lp["rows"])
    ok = all(r["pass"] for r in lp["rows"]) and nested["strict_count"] >= 95 and elapsed <= 600
    assert record(5, "moment experiment", ok,
                  f"sigma2 {lp['sigma2_hat']:.4f}; {rows}; strict nested-max increase in "
                  f"{nested['strict_count']}/100; {elapsed:.0f} s")


def test_06_form_witnesses():
    mesh = build_mesh("square", 1 / 16)
    cp = poincare_constant(mesh)
    coer, bound = math.inf, 0.0
    for seed in range(20):
        w = form_witnesses(mesh, sample_field(ModelConfig("lognormal"), seed), 200, seed, dt=0.02, C_P=cp)
        coer, bound = min(coer, w["coercivity"]), max(bound, w["boundedness"])
    ok = coer >= 0.5 and bound <= 2.0
    assert record(6, "coercivity/boundedness", ok,
                  f"min Garding ratio {coer:.3f} (>= 0.5), max boundedness ratio {bound:.3f} (<= 2)")


def test_07_apriori_sweep():
    start = time.perf_counter()
    cfg = EnsembleConfig(ModelConfig("lognormal"), h=1 / 32, dt=1 / 50)
    out = verify_apriori(map_samples(cfg, range(200)))
    elapsed = time.perf_counter() - start
    ok = out["pass_fraction"] >= 0.99 and out["n"] == 200 and elapsed <= 1200
    assert record(7, "a priori bound sweep", ok,
                  f"pass fraction {out['pass_fraction']:.3f} over {out['n']} samples, worst ratio "
                  f"{out['max_ratio']:.3e}, {len(out['failures'])} failures logged, {elapsed:.0f} s")


def test_08_form_equivalence():
    mesh = build_mesh("square", 1 / 16)
    tools = NormTools(mesh)
    worst = 0.0
    for seed in range(10):
        real = sample_field(ModelConfig("affine_tube", tau=0.5), seed)
        forcing, u0, _ = mms_problem(real)
        a = solve_pathwise(mesh, real, forcing, u0, 1.0, 0.02, 0.5, "standard")
        b = solve_pathwise(mesh, real, forcing, u0, 1.0, 0.02, 0.5, "weighted")
        diffs = [tools.l2_sq(mesh.restrict(x - y)) for x, y in zip(a.trajectory, b.trajectory)]
        worst = max(worst, math.sqrt(np.trapezoid(diffs, a.snapshot_times)))
    assert record(8, "form equivalence", worst <= 1e-6, f"max L2(0,tau;L2) difference {worst:.2e} over 10 samples")


def test_09_piola_suite():
    summary, _ = stokes_suite(seed=0, pairs=50)
    ok = (summary["rotation_divergence_defect"] <= 1e-6 and summary["pressure_term_max"] <= 1e-8
          and summary["piola_round_trip"] <= 1e-8)
    assert record(9, "Piola/Stokes suite", ok,
                  f"rotation div defect {summary['rotation_divergence_defect']:.1e}, pressure term "
                  f"{summary['pressure_term_max']:.1e} (50 pairs), round trip {summary['piola_round_trip']:.1e}")


def test_10_reproducibility(tmp_path):
    cfg = tmp_path / "mc.ini"
    cfg.write_text("[run]\nh = 0.0625\ndt = 0.05\nsamples = 12\nsnapshot_stride = 5\n[model]\nkind = lognormal\n")
    outs = []
    for workers in (1, 4):
        out = tmp_path / f"w{workers}"
        assert main(["run-mc", "--config", str(cfg), "--out", str(out), "--workers", str(workers)]) == 0
        outs.append(out)
    names = ("moments.csv", "constants.csv")
    same = all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names)
    assert record(10, "reproducibility", same, f"{', '.join(names)} byte-identical across workers 1 and 4: {same}")
