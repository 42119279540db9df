from __future__ import annotations

import numpy as np
import pytest

from src.app.core.errors import CapabilityError, ConfigError, ShapeMismatchError
from src.app.core.rng import RngState
from src.app.models.distributions import IsotropicGaussian, Ring, standard_normal, two_component_gmm
from src.app.models.networks import NetConfig, TrainConfig
from src.app.models.schedules import CustomSchedule, DdpmCosine, RectifiedLinear, identity_schedule
from src.app.services.distributions import NoiseModel, marginal_interp_score
from src.app.services.flow import PairBatch, euler_sample, rf_loss
from src.app.services.nn import VelocityNet, grad_check
from src.app.services.tweedie import (
    AnalyticScore,
    correction_coefficient,
    corrected_euler_sample,
    corrected_ode_step,
    corrected_one_step,
    corrected_rf_loss,
    corrected_rf_loss_and_grad,
    is_identity,
    train_score_dsm,
    tweedie_posterior_mean,
)


def test_rectified_linear_coefficient():
    assert correction_coefficient(RectifiedLinear(), 0.0) == 1.0
    assert correction_coefficient(RectifiedLinear(), 0.5) == pytest.approx(0.25)
    assert correction_coefficient(RectifiedLinear(), 1.0) == 0.0


def test_cosine_coefficient_vanishes_at_data_end():
    assert correction_coefficient(DdpmCosine(), 1.0) == pytest.approx(0.0, abs=1e-12)
    assert correction_coefficient(DdpmCosine(), 0.0) == pytest.approx(1.0, abs=1e-6)


def test_custom_schedule_interpolates():
    schedule = CustomSchedule(table=((0.0, 0.4), (1.0, 1.0)))
    assert correction_coefficient(schedule, 0.5) == pytest.approx(0.3)
    assert is_identity(identity_schedule()) and not is_identity(schedule)


def test_coefficient_outside_unit_interval_rejected():
    with pytest.raises(ConfigError):
        correction_coefficient(RectifiedLinear(), -0.1)


def test_posterior_mean_zero_score_is_identity():
    z = np.array([[1.0, -2.0]])
    np.testing.assert_array_equal(tweedie_posterior_mean(z, 0.7, np.zeros_like(z)), z)


def test_posterior_mean_conjugate_gaussian_grid():
    for tau2 in (0.25, 1.0, 4.0):
        for sigma2 in (0.01, 0.5, 2.0):
            model = NoiseModel(tau2, sigma2)
            z = np.linspace(-3.0, 3.0, 21)
            estimate = tweedie_posterior_mean(z, sigma2, model.marginal_score(z))
            np.testing.assert_allclose(estimate, model.posterior_mean(z), rtol=1e-12, atol=1e-12)


def test_posterior_mean_rejects_negative_coefficient():
    with pytest.raises(ConfigError):
        tweedie_posterior_mean(np.zeros(2), -1.0, np.zeros(2))


def test_posterior_mean_rejects_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        tweedie_posterior_mean(np.zeros(2), 1.0, np.zeros(3))


def test_analytic_score_needs_gaussian_prior():
    with pytest.raises(CapabilityError):
        AnalyticScore(Ring(), two_component_gmm())


def test_identity_schedule_loss_equals_plain_loss(small_net):
    gen = RngState(3).generator()
    batch = PairBatch(gen.standard_normal((9, 2)), gen.standard_normal((9, 2)))
    times = gen.uniform(size=9)
    source = AnalyticScore(standard_normal(2), two_component_gmm())
    assert corrected_rf_loss(small_net, batch, times, identity_schedule(), source) == rf_loss(small_net, batch, times)


def test_identity_schedule_sampler_equals_plain_euler(small_net):
    x0 = RngState(5).generator().standard_normal((7, 2))
    source = AnalyticScore(standard_normal(2), two_component_gmm())
    corrected = corrected_euler_sample(small_net, x0, 5, identity_schedule(), source)
    np.testing.assert_array_equal(corrected.samples, euler_sample(small_net, x0, 5).samples)
    assert corrected.nfe == 35


def test_corrected_loss_formula_one_dimensional():
    prior = standard_normal(1)
    target = IsotropicGaussian(mean=(2.0,), variance=1.0)
    net = VelocityNet.zeros(NetConfig(state_dim=1, hidden=(3,)))
    batch = PairBatch(np.array([[0.0]]), np.array([[2.0]]))
    t = 0.5
    xt = 1.0
    score = -(xt - t * 2.0) / ((1 - t) ** 2 + t**2)
    expected = (2.0 - (1 - t) ** 2 * score) ** 2
    value = corrected_rf_loss(net, batch, np.array([t]), RectifiedLinear(), AnalyticScore(prior, target))
    assert value == pytest.approx(expected, abs=1e-12)
    np.testing.assert_allclose(marginal_interp_score(prior, target, np.array([xt]), t), [score])


def test_corrected_loss_gradient(small_net):
    gen = RngState(8).generator()
    batch = PairBatch(gen.standard_normal((5, 2)), gen.standard_normal((5, 2)))
    times = gen.uniform(size=5)
    source = AnalyticScore(standard_normal(2), two_component_gmm())
    error = grad_check(
        small_net, lambda m: corrected_rf_loss_and_grad(m, batch, times, RectifiedLinear(), source), floor=1e-4
    )
    assert error <= 1e-5


def test_corrected_step_with_zero_velocity_follows_score():
    net = VelocityNet.zeros(NetConfig(state_dim=1, hidden=(4,)))
    source = AnalyticScore(standard_normal(1), standard_normal(1))
    x = corrected_ode_step(net, np.array([[1.0]]), 0.0, 0.1, RectifiedLinear(), source)
    np.testing.assert_allclose(x, [[0.9]])


def test_one_step_matches_full_interval_step():
    net = VelocityNet.zeros(NetConfig(state_dim=1, hidden=(4,)))
    source = AnalyticScore(standard_normal(1), standard_normal(1))
    schedule = CustomSchedule(table=((0.0, 0.4), (1.0, 1.0)))
    x0 = np.array([[2.0], [-1.0]])
    one = corrected_one_step(net, x0, schedule, source)
    np.testing.assert_array_equal(one, corrected_ode_step(net, x0, 0.0, 1.0, schedule, source))
    np.testing.assert_allclose(one, 0.4 * x0)


def test_step_leaving_unit_interval_rejected(small_net):
    source = AnalyticScore(standard_normal(2), two_component_gmm())
    with pytest.raises(ConfigError):
        corrected_ode_step(small_net, np.zeros((1, 2)), 0.95, 0.1, RectifiedLinear(), source)


def test_zero_step_score_training_leaves_net_unchanged():
    net = VelocityNet.init(NetConfig(state_dim=2, hidden=(4,)), RngState(2))
    before = [p.copy() for p in net.parameters()]
    trained, trace = train_score_dsm(net, standard_normal(2), two_component_gmm(), TrainConfig(steps=0))
    assert not trace.values
    for p, q in zip(trained.parameters(), before):
        np.testing.assert_array_equal(p, q)


def test_score_training_rejects_non_gaussian_prior():
    net = VelocityNet.init(NetConfig(state_dim=2, hidden=(4,)), RngState(2))
    with pytest.raises(CapabilityError):
        train_score_dsm(net, Ring(), two_component_gmm(), TrainConfig(steps=1))
