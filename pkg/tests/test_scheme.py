import math
import warnings

import numpy as np
import pytest

from mvem.brownian import TimeGrid, increments_from_paths, sample_increments, sample_paths
from mvem.measure import EmpiricalMeasure
from mvem.model import AssumptionConstants, LawMode, LawState, LinearMeanFieldModel, MeasureView, ModelSpec
from mvem.scheme import (
    BlowUpError,
    InitialLaw,
    Kind,
    ParticleEnsemble,
    UnsupportedLawError,
    compute_thresholds,
    em_step_clones,
    em_step_interacting,
    em_step_selfconsistent,
    law_sequence,
    moment_bound,
    moment_factors,
    run_clones,
    run_interacting,
    simulate,
)

SIMPLE = AssumptionConstants(alpha=2, beta=0, gamma=2, kappa=0, rho=1, c0=1, a=1, b=1)


def test_thresholds_example():
    th = compute_thresholds(SIMPLE, 0.9)
    assert th.h_star == pytest.approx(0.9)
    assert th.h_double_star == pytest.approx(0.9)
    assert th.h_sharp == pytest.approx(0.9)
    assert th.xi1 == pytest.approx(0.2)
    assert moment_factors(SIMPLE, 0.1)[0] == pytest.approx(0.82)
    with pytest.raises(ValueError):
        AssumptionConstants(alpha=1, beta=1, gamma=2, kappa=0, rho=1, c0=1, a=1, b=1)


def test_thresholds_linear_example(linear):
    th = compute_thresholds(linear.constants)
    assert th.h_star == pytest.approx(0.135)
    assert th.h_double_star == pytest.approx(0.3375)
    assert th.xi1 == pytest.approx(0.12)


def test_moment_constants_example(linear):
    a1, a2 = moment_factors(linear.constants, 0.005)
    assert a1 == pytest.approx(0.9942)
    assert a2 == pytest.approx(0.0041)
    assert moment_bound(linear.constants, 0.005, 36.0) == pytest.approx(36 + 0.0041 / 0.0058)


def _ensemble(states, kind, h=0.01, law=None):
    return ParticleEnsemble(np.asarray(states, dtype=float)[:, None], 0, TimeGrid(h, 10), kind, law)


def test_interacting_step_examples(linear):
    ens = _ensemble([6.0, 6.0, 6.0], Kind.INTERACTING)
    out = em_step_interacting(linear, ens, np.zeros(3))
    assert np.allclose(out.states[:, 0], 5.952, rtol=0, atol=1e-15)
    assert out.k == 1
    one = _ensemble([2.0], Kind.INTERACTING)
    dw = 0.3
    got = em_step_interacting(linear, one, [dw]).states[0, 0]
    assert got == pytest.approx(2.0 + 0.01 * (-1.2 + 0.4) * 2.0 + dw, abs=1e-15)


def test_interacting_step_is_synchronous(linear):
    # every particle sees the pre-step mean, whatever the ordering
    x = np.array([1.0, -2.0, 5.0, 0.5])
    dw = np.array([0.1, -0.2, 0.05, 0.0])
    out = em_step_interacting(linear, _ensemble(x, Kind.INTERACTING), dw).states[:, 0]
    want = x + 0.01 * (-1.2 * x + 0.4 * x.mean()) + dw
    assert np.allclose(out, want, atol=1e-15, rtol=0)
    perm = np.array([2, 0, 3, 1])
    outp = em_step_interacting(linear, _ensemble(x[perm], Kind.INTERACTING), dw[perm]).states[:, 0]
    assert np.allclose(outp, out[perm], atol=1e-15, rtol=0)


def test_clone_step_uses_law_not_ensemble(linear):
    law = LawState(np.array([6.0]), 36.0)
    ens = _ensemble([0.0, 10.0], Kind.CLONES, law=law)
    out = em_step_clones(linear, ens, np.zeros(2))
    assert out.law.mean[0] == pytest.approx(5.952)
    assert out.states[:, 0] == pytest.approx([0.01 * 0.4 * 6.0, 10.0 + 0.01 * (-12.0 + 2.4)])
    zero = LawState(np.array([0.0]), 0.0)
    laws = law_sequence(linear, zero, 0.01, 50)
    assert all(l.mean[0] == 0.0 for l in laws)


def test_clones_with_theta_zero_match_plain_ou():
    model = LinearMeanFieldModel(1.2, 0.0, 1.0)
    grid = TimeGrid(0.01, 200)
    dW = increments_from_paths(sample_paths(3, range(5), grid))
    laws = law_sequence(model, LawState(np.array([1.0]), 1.0), grid.h, grid.n_steps)
    got = run_clones(model, np.ones((5, 1)), dW, grid.h, laws, 1)
    x = np.ones(5)
    for k in range(grid.n_steps):
        x = x + grid.h * (-1.2 * x) + dW[:, k, 0]
    assert np.array_equal(got[-1, :, 0], x)


def test_selfconsistent_matches_clone_entry_point(linear):
    law = LawState(np.array([6.0]), 36.0)
    inc = sample_increments(1, 0, TimeGrid(0.01, 30)).values
    x, l = np.array([6.0]), law
    ens = _ensemble([6.0], Kind.CLONES, law=law)
    for k in range(30):
        x, l = em_step_selfconsistent(linear, x, l, inc[k], 0.01)
        ens = em_step_clones(linear, ens, inc[k])
    assert np.array_equal(x, ens.states[0])
    assert l.mean[0] == ens.law.mean[0]


def test_selfconsistent_deterministic_examples():
    model = LinearMeanFieldModel(1.2, 0.4, 0.0)
    law = LawState(np.array([6.0]), 36.0)
    x = np.array([6.0])
    for k in range(1, 101):
        x, law = em_step_selfconsistent(model, x, law, [0.0], 0.01)
        assert x[0] == law.mean[0]
    assert x[0] == pytest.approx(6 * 0.992 ** 100, rel=1e-13)


def test_selfconsistent_rejects_law_free_models():
    model = ModelSpec(1, lambda x, mu: -x, lambda x, mu: np.ones((x.shape[0], 1, 1)))
    with pytest.raises(UnsupportedLawError):
        em_step_selfconsistent(model, [0.0], LawState(np.array([0.0]), 0.0), [0.0], 0.1)


def test_simulate_mean_matches_recursion(linear):
    rec = simulate(linear, Kind.CLONES, 10_000, TimeGrid(0.01, 800), 42, InitialLaw.point(6.0), thin=100)
    final = rec.states[-1, :, 0]
    target = 6 * 0.992 ** 800
    assert rec.law_mean[-1, 0] == pytest.approx(target, rel=1e-12)
    assert abs(final.mean() - target) < 3 * final.std() / math.sqrt(final.size)


def test_simulate_interacting_mean(linear):
    rec = simulate(linear, Kind.INTERACTING, 10_000, TimeGrid(0.01, 800), 42, InitialLaw.point(6.0), thin=800)
    final = rec.states[-1, :, 0]
    assert abs(final.mean() - 6 * 0.992 ** 800) < 3 * final.std() / math.sqrt(final.size)


def test_simulate_is_deterministic_and_read_only(linear):
    args = (linear, Kind.INTERACTING, 50, TimeGrid(0.01, 100), 9, InitialLaw(0.0, 1.0))
    a, b = simulate(*args), simulate(*args)
    assert np.array_equal(a.states, b.states)
    with pytest.raises(ValueError):
        a.states[0, 0, 0] = 1.0


def test_simulate_zero_horizon(linear):
    rec = simulate(linear, Kind.CLONES, 4, TimeGrid(0.01, 0), 1, InitialLaw.point(2.0))
    assert rec.times.tolist() == [0.0]
    assert rec.states.shape == (1, 4, 1)


def test_simulate_warns_above_h_sharp(linear):
    with pytest.warns(RuntimeWarning):
        rec = simulate(linear, Kind.CLONES, 2, TimeGrid(0.5, 2), 1, InitialLaw.point(1.0))
    assert rec.notes


def test_clone_independence(linear):
    rec = simulate(linear, Kind.CLONES, 2, TimeGrid(0.01, 10_000), 5, InitialLaw.point(0.0))
    inc = np.diff(rec.states[:, :, 0], axis=0)
    assert abs(np.corrcoef(inc[:, 0], inc[:, 1])[0, 1]) < 0.02


def test_blow_up_is_reported():
    model = ModelSpec(1, lambda x, mu: 1e200 * x * x, lambda x, mu: np.zeros((x.shape[0], 1, 1)))
    with np.errstate(over="ignore"), pytest.raises(BlowUpError) as err:
        simulate(model, Kind.INTERACTING, 3, TimeGrid(0.5, 20), 0, InitialLaw.point(1.0))
    assert err.value.step >= 1
    linear = LinearMeanFieldModel(1.2, 0.4, 1.0)
    x0 = np.zeros((1, 2, 1))
    dW = np.zeros((1, 2, 3, 1))
    dW[0, 1, 2, 0] = np.inf
    with pytest.raises(BlowUpError) as err:
        run_interacting(linear, x0, dW, 0.1)
    assert (err.value.step, err.value.particle) == (3, 1)


def test_generic_model_runs_and_matches_linear_kernel(linear):
    generic = ModelSpec(1, lambda x, mu: -1.2 * x + 0.4 * mu.mean,
                        lambda x, mu: np.ones((x.shape[0], 1, 1)))
    grid = TimeGrid(0.01, 50)
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(2, 8, 1))
    dW = rng.normal(scale=0.1, size=(2, 8, 50, 1))
    fast = run_interacting(linear, x0, dW, grid.h, 5)
    slow = run_interacting(generic, x0, dW, grid.h, 5)
    assert np.allclose(fast, slow, atol=1e-12, rtol=0)


def test_proxy_clones_for_generic_model():
    generic = ModelSpec(1, lambda x, mu: -1.2 * x + 0.4 * mu.mean, lambda x, mu: np.ones((x.shape[0], 1, 1)))
    rec = simulate(generic, Kind.CLONES, 200, TimeGrid(0.01, 100), 3, InitialLaw.point(6.0), proxy_size=512)
    assert abs(rec.mean[-1, 0] - 6 * 0.992 ** 100) < 0.2
    assert rec.notes
    with pytest.raises(UnsupportedLawError):
        simulate(generic, Kind.SELF_CONSISTENT, 2, TimeGrid(0.01, 2), 3, InitialLaw.point(6.0))


def test_initial_law_sampling():
    law = InitialLaw(1.0, 4.0)
    a = law.sample(10, 5)
    assert np.array_equal(a[3:], law.sample(7, 5, offset=3))
    assert law.law_state().second_moment == 5.0
    with pytest.raises(ValueError):
        InitialLaw(0.0, -1.0)
