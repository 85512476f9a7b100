import dataclasses

import numpy as np
import pytest

from mvem.measure import EmpiricalMeasure
from mvem.model import (
    LINEAR_EXAMPLE_CONSTANTS,
    AssumptionConstants,
    LawMode,
    LawState,
    LinearMeanFieldModel,
    MeasureView,
    ModelEvaluationError,
    ModelSpec,
    check_assumption2,
    check_assumption3,
    check_assumption4,
    eval_diffusion,
    eval_drift,
    sample_inputs,
)


def point(v):
    return MeasureView.closed_form([v], v * v)


def test_linear_drift_examples(linear):
    assert eval_drift(linear, [6.0], point(6.0))[0] == pytest.approx(-4.8)
    assert eval_drift(linear, [0.0], point(0.0))[0] == 0.0
    with pytest.raises(ModelEvaluationError):
        eval_drift(linear, [np.nan], point(0.0))
    with pytest.raises(ModelEvaluationError):
        eval_drift(linear, [1.0, 2.0], point(0.0))


def test_linear_diffusion_examples(linear):
    assert eval_diffusion(linear, [3.0], point(-1.0)).tolist() == [[1.0]]
    half = LinearMeanFieldModel(1.2, 0.4, 0.5)
    assert eval_diffusion(half, [-7.0], point(2.0)).tolist() == [[0.5]]


def test_nan_output_is_rejected():
    bad = ModelSpec(1, lambda x, mu: np.full_like(x, np.nan), lambda x, mu: np.ones((x.shape[0], 1, 1)))
    with pytest.raises(ModelEvaluationError):
        eval_drift(bad, [0.0], point(0.0))
    bad_s = ModelSpec(1, lambda x, mu: x, lambda x, mu: np.full((x.shape[0], 1, 1), np.inf))
    with pytest.raises(ModelEvaluationError):
        eval_diffusion(bad_s, [0.0], point(0.0))


def test_measure_views():
    emp = MeasureView.empirical(EmpiricalMeasure([-1.0, 3.0]))
    assert emp.is_empirical and emp.mean.tolist() == [1.0] and emp.second_moment == 5.0
    with pytest.raises(ValueError):
        MeasureView.closed_form([2.0], 1.0)  # second moment below |mean|^2


def test_law_state_and_linear_law_step(linear):
    law = LawState(np.array([6.0]), 36.0)
    nxt = linear.law_step(law, 0.01)
    assert nxt.mean[0] == pytest.approx(5.952)
    # variance after one step from a point mass is sigma^2 h
    assert nxt.variance == pytest.approx(0.01)
    with pytest.raises(ValueError):
        LawState(np.array([2.0]), 1.0)


def test_stationary_variances(linear):
    assert linear.stationary_variance() == pytest.approx(0.416667, abs=1e-6)
    assert linear.stationary_variance(0.01) == pytest.approx(0.419183, abs=2e-6)
    # fixed point of v <- (1 - lam h)^2 v + sigma^2 h
    h = 0.04
    v = linear.stationary_variance(h)
    assert v == pytest.approx((1 - 1.2 * h) ** 2 * v + h)


def test_linear_parameter_validation():
    with pytest.raises(ValueError):
        LinearMeanFieldModel(0.4, 1.2)
    with pytest.raises(ValueError):
        LinearMeanFieldModel(1.2, 0.4, -1.0)
    assert LinearMeanFieldModel(1.2, 0.4, 0.0).sigma0 == 0.0
    assert LinearMeanFieldModel().law_mode is LawMode.EXACT_LINEAR


def test_constants_validation():
    with pytest.raises(ValueError):
        dataclasses.replace(LINEAR_EXAMPLE_CONSTANTS, alpha=0.4)
    with pytest.raises(ValueError):
        dataclasses.replace(LINEAR_EXAMPLE_CONSTANTS, kappa=1.6)
    with pytest.raises(ValueError):
        dataclasses.replace(LINEAR_EXAMPLE_CONSTANTS, c0=0.0)


def test_monotone_and_dissipative_hold_on_samples(linear):
    report = check_assumption2(linear, sample_inputs(1, 1000, seed=1))
    assert report.ok, report.violations[:3]
    assert report.n_samples == 1000


def test_monotone_check_detects_bad_constants(linear):
    bad = dataclasses.replace(LINEAR_EXAMPLE_CONSTANTS, alpha=10.0, beta=0.0)
    mu = EmpiricalMeasure([0.0])
    report = check_assumption2(linear, [(np.array([1.0]), np.array([0.0]), mu, mu)], bad)
    assert report.count("monotone") == 1
    assert report.violations[0].lhs == pytest.approx(-2.4)


def test_dissipative_inequality_fails_at_origin(linear):
    # sigma0^2 (1 + rho) = 2 exceeds kappa (1 + rho) = 0.8 at x = 0, mu = delta_0
    mu = EmpiricalMeasure([0.0])
    z = np.array([0.0])
    report = check_assumption2(linear, [(z, z, mu, mu)])
    assert report.count("dissipative") == 2
    assert report.violations[0].lhs == pytest.approx(2.0)
    assert report.violations[0].rhs == pytest.approx(0.8)


def test_identical_arguments_have_zero_lhs(linear):
    mu = EmpiricalMeasure([1.0, 2.0])
    x = np.array([3.0])
    assert check_assumption2(linear, [(x, x, mu, mu)]).count("monotone") == 0
    r3 = check_assumption3(linear, [(x, x, mu, mu)])
    assert r3.count("lipschitz") == 0
    assert r3.min_slack["lipschitz"] == 0.0


def test_growth_and_lipschitz_examples(linear):
    samples = sample_inputs(1, 1000, seed=2)
    assert check_assumption3(linear, samples).ok
    weak = dataclasses.replace(LINEAR_EXAMPLE_CONSTANTS, c0=0.1)
    mu = EmpiricalMeasure([0.0])
    far = np.array([10.0])
    assert check_assumption3(linear, [(far, far, mu, mu)], weak).count("growth") >= 1


def test_contraction_condition_examples():
    base = dict(gamma=1.6, kappa=0.4, rho=1.0, c0=4.0)
    assert check_assumption4(AssumptionConstants(alpha=1.6, beta=0.4, a=0.5, b=0.3, **base))
    assert not check_assumption4(LINEAR_EXAMPLE_CONSTANTS)
    assert not check_assumption4(AssumptionConstants(alpha=2, beta=0, gamma=2, kappa=0, rho=1, c0=1, a=1, b=1))


def test_checks_need_constants():
    with pytest.raises(ValueError):
        check_assumption2(LinearMeanFieldModel(), sample_inputs(1, 2))


def test_custom_model_in_two_dimensions():
    model = ModelSpec(2, lambda x, mu: -x + mu.mean, lambda x, mu: np.broadcast_to(np.eye(2), (x.shape[0], 2, 2)))
    mu = MeasureView.empirical(EmpiricalMeasure([[1.0, 0.0], [3.0, 2.0]]))
    assert eval_drift(model, [1.0, 1.0], mu).tolist() == [1.0, 0.0]
    assert eval_diffusion(model, [0.0, 0.0], mu).shape == (2, 2)
