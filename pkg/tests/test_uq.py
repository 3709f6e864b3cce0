import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from randtube import uq
from randtube.errors import ConfigError, HoldAllExit
from randtube.fields import ModelConfig, sample_field
from randtube.uq import (EnsembleConfig, MomentField, MomentReport, closed_form_CD, empirical_lp,
                         flow_constant_CD, lp_experiment, map_samples, nested_max, run_ensemble, verify_apriori,
                         verify_no_uniform_bound, welford)

SMALL = dict(h=0.25, dt=0.1)


@given(arrays(np.float64, 1000, elements=st.floats(-1e3, 1e3)))
def test_welford_matches_two_pass(x):
    mean, var = welford(x)
    assert mean == pytest.approx(np.mean(x), abs=1e-10 * (1 + np.abs(x).max()))
    assert var == pytest.approx(np.var(x, ddof=1), abs=1e-10 * (1 + np.abs(x).max() ** 2))


def test_moment_field_matches_numpy(rng):
    data = rng.standard_normal((40, 3, 5))
    mf = MomentField(np.arange(3.0), 5)
    for d in data:
        mf.update(d)
    assert np.allclose(mf.mean, data.mean(0), atol=1e-14)
    assert np.allclose(mf.variance, data.var(0, ddof=1), atol=1e-13)
    assert np.allclose(mf.psums[4], np.sum(data**4, axis=0))


@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(0.01, 1e3)))
def test_power_means_are_monotone(v):
    norms = [empirical_lp(v, p) for p in (1, 2, 4, 8)]
    assert all(b >= a * (1 - 1e-12) for a, b in zip(norms, norms[1:]))


def test_report_power_mean_flag():
    ledgers = [uq.PathConstants.from_maxima(1.0, 1.0 + s, 0.5, 0.0, 0.2) for s in range(5)]
    report = MomentReport.from_ledger(ledgers, sizes=(2, 5), sigma2=0.1)
    assert report.power_mean_monotone()
    assert report.nested["C_D"] == [2.0, 5.0]
    assert report.lower_bound["8"] == pytest.approx(math.exp(0.4))


def test_zero_field_ensemble_is_deterministic():
    cfg = EnsembleConfig(ModelConfig("zero"), **SMALL)
    res = run_ensemble(cfg, 10)
    assert not res.moments.variance.any()
    single = uq.run_sample(cfg, 99)
    assert np.allclose(res.moments.mean, single.snapshots, atol=1e-15)
    ratios = {r.ratio for r in res.results}
    assert len(ratios) == 1 and ratios.pop() <= 1.0


def test_zero_data_ratio_is_zero():
    cfg = EnsembleConfig(ModelConfig("lognormal"), source=0.0, u0="zero", **SMALL)
    out = verify_apriori(run_ensemble(cfg, 3).results)
    assert out["pass_fraction"] == 1.0 and out["max_ratio"] == 0.0


def test_standard_error_scales_with_inverse_sqrt_n():
    cfg = EnsembleConfig(ModelConfig("affine_tube"), **SMALL)
    sizes, errs = (100, 400, 1600), []
    res = run_ensemble(cfg, max(sizes))
    snaps = np.array([r.snapshots[-1] for r in res.results])
    centre = snaps.shape[1] // 2
    for n in sizes:
        errs.append(np.std(snaps[:n, centre], ddof=1) / math.sqrt(n))
    slope = np.polyfit(np.log(sizes), np.log(errs), 1)[0]
    assert abs(slope + 0.5) <= 0.1


def test_results_independent_of_worker_count():
    cfg = EnsembleConfig(ModelConfig("kl"), **SMALL)
    one = map_samples(cfg, range(6), workers=1)
    two = map_samples(cfg, range(6), workers=2)
    for a, b in zip(one, two):
        assert a.seed == b.seed and a.ratio == b.ratio
        assert np.array_equal(a.snapshots, b.snapshots)
        assert a.constants.row() == b.constants.row()


def test_rejected_samples_are_counted(monkeypatch):
    real_solve = uq.solve_pathwise

    def flaky(mesh, real, *args, **kw):
        if real.sample.seed % 2:
            raise HoldAllExit("left B", seed=real.sample.seed, reason="hold-all exit")
        return real_solve(mesh, real, *args, **kw)

    monkeypatch.setattr(uq, "solve_pathwise", flaky)
    res = run_ensemble(EnsembleConfig(ModelConfig("zero"), **SMALL), 5)
    assert (res.moments.count, res.moments.rejected) == (3, 2)
    assert [r.reason for r in res.results if r.status == "rejected"] == ["hold-all exit"] * 2


def test_nested_max_sequences():
    flat = verify_no_uniform_bound(np.ones(10000))
    assert flat["max"] == [1.0, 1.0, 1.0] and not flat["strict_increase"]
    cds = closed_form_CD(ModelConfig("lognormal"), range(10000), dt=0.02)
    seq = verify_no_uniform_bound(cds)
    assert seq["non_decreasing"]
    assert nested_max(cds, (10, 100)) == [cds[:10].max(), cds[:100].max()]


def test_affine_stretch_bounded_by_closed_form():
    cfg = ModelConfig("affine_tube")
    bound = math.sin(1.0) + cfg.offset
    stretch = [max(sample_field(cfg, s).stretch(cfg.tau)[0]) for s in range(1000)]
    assert max(nested_max(stretch, (100, 1000))) <= bound


def test_closed_form_CD_matches_integrated_flow():
    model = ModelConfig("lognormal")
    fast = closed_form_CD(model, range(3), dt=0.001)
    slow = [flow_constant_CD(model, s, 0.001)[0] for s in range(3)]
    assert np.allclose(fast, slow, rtol=1e-5)


def test_lp_experiment_structure():
    out = lp_experiment(ModelConfig("lognormal", variance_scale=0.2), 200, dt=0.02)
    assert [r["p"] for r in out["rows"]] == [1, 2, 4, 8]
    assert all(r["finite"] for r in out["rows"])
    assert out["sigma2_hat"] == pytest.approx(out["sigma2_path_formula"], rel=0.3)


def test_unknown_initial_value():
    with pytest.raises(ConfigError):
        EnsembleConfig(u0="bump").initial()
