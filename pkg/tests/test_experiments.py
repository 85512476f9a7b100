import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvem import experiments as ex
from mvem.model import LINEAR_EXAMPLE_CONSTANTS, LinearMeanFieldModel, ModelSpec


def strip_times(d):
    d = dict(d)
    d.pop("timestamp")
    d.pop("wall_clock_s")
    return d


def test_loglog_slope_examples():
    xs = np.array([0.04, 0.02, 0.01, 0.005, 0.0025])
    fit = ex.loglog_slope(xs, xs)
    assert fit.slope == pytest.approx(1.0) and fit.r_squared == pytest.approx(1.0)
    assert ex.loglog_slope(xs, np.sqrt(xs)).slope == pytest.approx(0.5)
    assert len(fit.points) == 5
    with pytest.raises(ValueError):
        ex.loglog_slope([1, 2], [1, 2])
    with pytest.raises(ValueError):
        ex.loglog_slope([1, 2, 3], [1, 0, 3])


@settings(max_examples=100, deadline=None)
@given(eps=st.lists(st.floats(-0.05, 0.05), min_size=5, max_size=5), c=st.floats(0.01, 100))
def test_loglog_slope_perturbation(eps, c):
    xs = np.array([0.04, 0.02, 0.01, 0.005, 0.0025])
    ys = c * np.sqrt(xs) * (1 + np.array(eps))
    fit = ex.loglog_slope(xs, ys)
    assert 0.45 <= fit.slope <= 0.55
    assert 0.0 <= fit.r_squared <= 1.0


def test_slope_verdict_rules():
    good = ex.SlopeFit(0.5, 0.0, 0.99, [])
    noisy = ex.SlopeFit(0.5, 0.0, 0.5, [])
    off = ex.SlopeFit(1.0, 0.0, 0.99, [])
    assert ex._slope_verdict("s", good, 0.4, 0.6).status == ex.PASS
    assert ex._slope_verdict("s", noisy, 0.4, 0.6).status == ex.INCONCLUSIVE
    assert ex._slope_verdict("s", off, 0.4, 0.6).status == ex.FAIL
    assert ex._slope_verdict("s", None, 0.4, 0.6).status == ex.INCONCLUSIVE


def test_strong_convergence_self_comparison_is_zero():
    model = LinearMeanFieldModel()
    rep = ex.study_strong_convergence(model, h_set=(0.01, 0.005, 0.0025), h_ref=0.0025, M=50)
    assert rep.metrics["rmse"][-1] == 0.0
    assert all(r > 0 for r in rep.metrics["rmse"][:-1])
    assert rep.verdict("rmse_slope").status == ex.INCONCLUSIVE


def test_strong_convergence_deterministic_slope_one():
    model = LinearMeanFieldModel(1.2, 0.4, 0.0)
    rep = ex.study_strong_convergence(model, M=4, h_ref=0.04 / 2 ** 8)
    assert rep.fits["rmse_vs_h"].slope == pytest.approx(1.0, abs=0.05)


def test_strong_convergence_rejects_bad_grids():
    model = LinearMeanFieldModel()
    with pytest.raises(ValueError):
        ex.study_strong_convergence(model, h_set=(0.04, 0.02, 0.01), h_ref=math.exp(-4), M=2)
    generic = ModelSpec(1, lambda x, mu: -x, lambda x, mu: np.ones((x.shape[0], 1, 1)))
    with pytest.raises(ex.UnsupportedLawError):
        ex.study_strong_convergence(generic, M=2)


def test_chaos_decoupled_single_particle_is_zero():
    model = LinearMeanFieldModel(1.2, 0.0, 1.0)
    rep = ex.study_chaos_vs_N(model, N_set=(1, 2, 4), h=0.01, T=1.0, R=5)
    assert rep.metrics["mse"] == [0.0, 0.0, 0.0]


def test_chaos_doubling_N_halves_mse():
    rep = ex.study_chaos_vs_N(LinearMeanFieldModel(), N_set=(50, 100, 200), h=0.001, T=1.0, R=300)
    mse = rep.metrics["mse"]
    for a, b in zip(mse, mse[1:]):
        assert 0.35 <= b / a <= 0.65
    assert rep.verdict("mse_non_increasing").status == ex.PASS


def test_chaos_with_proxy_law():
    generic = ModelSpec(1, lambda x, mu: -1.2 * x + 0.4 * mu.mean, lambda x, mu: np.ones((x.shape[0], 1, 1)))
    rep = ex.study_chaos_vs_N(generic, N_set=(4, 8, 16), h=0.01, T=0.5, R=4, proxy_size=64)
    assert len(rep.metrics["mse"]) == 3
    assert any("proxy" in n for n in rep.notes)


def test_error_vs_h_self_comparison_and_ratio():
    model = LinearMeanFieldModel()
    rep = ex.study_error_vs_h(model, h_set=(0.04, 0.02, 0.01), h_ref=0.01, N=20, R=5)
    assert rep.metrics["mse"][-1] == 0.0
    # with additive noise EM has strong order 1, so MSE(0.04)/MSE(0.01) is near 16
    rep = ex.study_error_vs_h(model, h_set=(0.04, 0.02, 0.01), h_ref=0.04 / 2 ** 6, N=100, R=20)
    ratio = rep.metrics["mse"][0] / rep.metrics["mse"][2]
    assert 8 <= ratio <= 24


def test_contraction_examples(linear):
    rep = ex.study_contraction(linear, M=20)
    assert rep.metrics["max_relative_error"] <= 1e-10
    assert rep.metrics["decay_rate"] >= rep.metrics["xi1"]
    assert rep.metrics["step_factor"] == pytest.approx(0.992)
    assert rep.passed
    same = ex.study_contraction(linear, x=2.0, y=2.0, M=5)
    assert same.metrics["max_distance"] == 0.0
    assert same.passed


def test_moment_bound_trivial_and_constants():
    model = LinearMeanFieldModel(1.2, 0.4, 0.0, constants=LINEAR_EXAMPLE_CONSTANTS)
    rep = ex.study_moment_bound(model, M=10, h=0.005, T=1.0, x0=0.0)
    assert rep.metrics["max_second_moment"] == 0.0
    assert rep.passed
    rep = ex.study_moment_bound(LinearMeanFieldModel(constants=LINEAR_EXAMPLE_CONSTANTS), M=100, h=0.005, T=1.0)
    assert rep.metrics["A1"] == pytest.approx(0.9942)
    assert rep.metrics["C1"] == pytest.approx(36.70689655, rel=1e-8)
    with pytest.raises(ValueError):
        ex.study_moment_bound(LinearMeanFieldModel(), M=2, T=0.01)


def test_moment_bound_warns_at_large_h():
    rep = ex.study_moment_bound(LinearMeanFieldModel(constants=LINEAR_EXAMPLE_CONSTANTS), M=10, h=0.2, T=1.0)
    assert any("h*" in n for n in rep.notes)


def test_invariant_measure_small_run(linear):
    rep = ex.study_invariant_measure(linear, h_set=(0.04, 0.02, 0.01), M=2000, T_long=10.0,
                                     initials=(-6.0, 6.0), discrete_tol=0.05, uniq_tol=0.1)
    assert rep.metrics["h=0.01"]["analytic_gap"] == pytest.approx(0.0019452, abs=1e-7)
    assert rep.metrics["h=0.01"]["discrete_var"] == pytest.approx(1 / (2.4 - 0.0144))
    assert set(rep.metrics["uniqueness_w2"]) == {"-6|6"}
    assert "rate_constant" in rep.metrics


def test_density_point_mass_flagged(linear):
    rep = ex.study_density_evolution(linear, M=200, h=0.01, snapshot_times=(0.0, 0.1), initials=(6.0,))
    assert rep.metrics["x0=6,t=0"]["degenerate"]
    header, rows = rep.tables["density_x0=6,t=0"]
    assert header == ("grid", "density")
    assert max(r[1] for r in rows) == pytest.approx(1.0)


def test_density_t4_t8_closed_form_gap(linear):
    # the exact EM laws at t=4 and t=8 from X0=6 differ by about 0.13 in sup-norm
    gap = ex._linear_density_gap(linear, 6.0, 0.01, 4.0, 8.0)
    assert gap == pytest.approx(0.1324, abs=1e-3)
    rep = ex.study_density_evolution(linear, M=10_000, h=0.01, snapshot_times=(4.0, 8.0),
                                     initials=(6.0,), compare_times=(4.0, 8.0))
    info = rep.verdict("same_run_t4_t8")
    assert info.status == ex.INFO
    assert abs(info.value["empirical"] - gap) < 0.03


def test_density_tau_units(linear):
    rep = ex.study_density_evolution(linear, kind="interacting", N=500, M=500, h=0.01,
                                     snapshot_times=(0.0, 0.2, 8.0), initials=(-3.0, 3.0),
                                     time_unit="tau", tol=0.05)
    assert rep.config["tau"] == pytest.approx(1.25)
    assert rep.config["snapshot_times"] == pytest.approx([0.0, 0.25, 10.0])
    assert rep.passed


@pytest.mark.parametrize("study,kwargs", [
    (ex.study_strong_convergence, dict(M=300)),
    (ex.study_chaos_vs_N, dict(N_set=(10, 20, 40), h=0.01, R=30)),
    (ex.study_error_vs_h, dict(N=10, R=7)),
    (ex.study_invariant_measure, dict(M=500, T_long=4.0, initials=(-1.0, 1.0))),
    (ex.study_moment_bound, dict(M=300, T=2.0)),
])
def test_reports_independent_of_threads(linear, study, kwargs):
    a = study(linear, threads=1, **kwargs).to_dict()
    b = study(linear, threads=3, **kwargs).to_dict()
    assert json.dumps(strip_times(a), sort_keys=True) == json.dumps(strip_times(b), sort_keys=True)


def test_write_outputs(tmp_path, linear):
    rep = ex.study_contraction(linear, M=5, T=0.5)
    d1 = ex.write_outputs(rep, tmp_path)
    d2 = ex.write_outputs(rep, tmp_path, now=None)
    assert d1 != d2 and d1.parent == d2.parent == tmp_path / "contraction"
    manifest = json.loads((d1 / "manifest.json").read_text())
    assert manifest["config_hash"] == ex.config_hash(rep.config) == d1.name.split("-")[1]
    assert manifest["seed"] == ex.DEFAULT_SEED
    assert any("reference" in n for n in manifest["deviations"])
    report = json.loads((d1 / "report.json").read_text())
    assert report["study"] == "contraction" and report["passed"]
    with open(d1 / "msd_vs_t.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x", "y", "stderr"]
    assert float(rows[1][1]) == 144.0
    assert len(rows) == 52
    assert float(rows[2][1]) == float(rep.tables["msd_vs_t"][1][1][1])


def test_config_hash_is_stable():
    assert ex.config_hash({"a": 1, "b": [0.1]}) == ex.config_hash({"b": [0.1], "a": 1})
    assert ex.config_hash({"a": 1}) != ex.config_hash({"a": 2})
