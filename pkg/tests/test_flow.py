from __future__ import annotations

import numpy as np
import pytest

from src.app.core.errors import ConfigError, ShapeMismatchError
from src.app.core.rng import RngState
from src.app.models.distributions import PointMass, standard_normal, two_component_gmm
from src.app.models.networks import NetConfig, TrainConfig
from src.app.services import distributions
from src.app.services.flow import (
    CountingField,
    PairBatch,
    euler_sample,
    interpolate,
    reflow_repair,
    rf_loss,
    sample_concurrently,
    straightness,
    train_rectified_flow,
)
from src.app.services.nn import VelocityNet
from tests.conftest import constant_net


def test_interpolate_endpoints_and_midpoint():
    x0, x1 = np.array([0.0, 2.0]), np.array([4.0, -2.0])
    np.testing.assert_array_equal(interpolate(x0, x1, 0.0), x0)
    np.testing.assert_array_equal(interpolate(x0, x1, 1.0), x1)
    np.testing.assert_array_equal(interpolate(x0, x1, 0.5), [2.0, 0.0])


def test_interpolate_rejects_time_outside_unit_interval():
    with pytest.raises(ConfigError):
        interpolate(np.zeros(2), np.ones(2), 1.5)


def test_interpolate_rejects_mismatched_shapes():
    with pytest.raises(ShapeMismatchError):
        interpolate(np.zeros(2), np.ones(3), 0.5)


def test_rf_loss_of_zero_net_is_squared_displacement():
    net = VelocityNet.zeros(NetConfig(state_dim=2, hidden=(3,)))
    batch = PairBatch(np.zeros((1, 2)), np.array([[3.0, 4.0]]))
    assert rf_loss(net, batch, np.array([0.3])) == pytest.approx(25.0)


def test_rf_loss_of_exact_constant_field_is_zero():
    c = np.array([1.0, -2.0])
    gen = RngState(2).generator()
    x0 = gen.standard_normal((8, 2))
    batch = PairBatch(x0, x0 + c)
    assert rf_loss(constant_net(c), batch, gen.uniform(size=8)) == pytest.approx(0.0, abs=1e-24)


def test_euler_with_constant_field_is_exact():
    c = np.array([0.5, -1.5])
    x0 = np.array([[1.0, 1.0], [-2.0, 0.0]])
    result = euler_sample(constant_net(c), x0, 7)
    np.testing.assert_allclose(result.samples, x0 + c, atol=1e-12)
    assert result.nfe == 7 * 2


def test_one_step_euler_is_x0_plus_velocity(small_net):
    x0 = RngState(4).generator().standard_normal((5, 2))
    np.testing.assert_array_equal(euler_sample(small_net, x0, 1).samples, x0 + small_net(x0, 0.0))


def test_exact_point_mass_field_is_integrated_exactly():
    target = np.array([2.0, -1.0])

    def field(x, t, cond=None):
        return (target - x) / (1.0 - t)

    x0 = RngState(9).generator().standard_normal((16, 2))
    np.testing.assert_allclose(euler_sample(field, x0, 20).samples, np.broadcast_to(target, (16, 2)), atol=1e-6)


def test_euler_rejects_zero_steps(small_net):
    with pytest.raises(ConfigError):
        euler_sample(small_net, np.zeros((1, 2)), 0)


def test_counting_field_counts_rows(small_net):
    counter = CountingField(small_net)
    counter(np.zeros((4, 2)), 0.0)
    counter(np.zeros(2), 0.5)
    assert counter.evaluations == 5 and counter.calls == 2


async def test_concurrent_sampling_matches_serial(small_net):
    x0 = RngState(11).generator().standard_normal((10, 2))
    serial = euler_sample(small_net, x0, 6)
    chunked = await sample_concurrently(small_net, x0, 6, chunks=3)
    np.testing.assert_allclose(chunked.samples, serial.samples, rtol=1e-12, atol=1e-12)
    assert chunked.nfe == serial.nfe


async def test_concurrent_sampling_broadcasts_one_condition_row(cond_net):
    x0 = RngState(12).generator().standard_normal((7, 2))
    cond = np.array([[0.5, -1.0, 2.0]])
    serial = euler_sample(cond_net, x0, 3, np.repeat(cond, 7, axis=0))
    chunked = await sample_concurrently(cond_net, x0, 3, cond, chunks=3)
    np.testing.assert_allclose(chunked.samples, serial.samples, rtol=1e-12, atol=1e-12)
    assert chunked.nfe == 21


def test_reflow_of_zero_field_keeps_noise():
    net = VelocityNet.zeros(NetConfig(state_dim=2, hidden=(3,)))
    pairs = reflow_repair(net, standard_normal(2), 12, RngState(0), n_steps=5)
    np.testing.assert_array_equal(pairs.x0, pairs.x1)


def test_straightness_of_exact_field_is_zero():
    c = np.array([1.0, 1.0])
    x0 = RngState(1).generator().standard_normal((6, 2))
    assert straightness(constant_net(c), PairBatch(x0, x0 + c), 8) == pytest.approx(0.0, abs=1e-24)


def test_straightness_needs_two_grid_points():
    with pytest.raises(ConfigError):
        straightness(constant_net(np.zeros(2)), PairBatch(np.zeros((1, 2)), np.zeros((1, 2))), 1)


def test_training_is_deterministic():
    cfg = NetConfig(state_dim=2, hidden=(8,))
    train = TrainConfig(steps=25, batch_size=32, seed=4)
    a, trace_a = train_rectified_flow(VelocityNet.init(cfg, RngState(4)), standard_normal(2), two_component_gmm(), train)
    b, trace_b = train_rectified_flow(VelocityNet.init(cfg, RngState(4)), standard_normal(2), two_component_gmm(), train)
    assert trace_a.values == trace_b.values
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa, pb)


def test_training_needs_a_step(small_net):
    with pytest.raises(ConfigError):
        train_rectified_flow(small_net, standard_normal(2), two_component_gmm(), TrainConfig(steps=0))


def test_training_rejects_dimension_mismatch(small_net):
    with pytest.raises(ShapeMismatchError):
        train_rectified_flow(small_net, standard_normal(3), standard_normal(3), TrainConfig(steps=1))


@pytest.mark.slow
def test_point_mass_target_is_learned():
    location = (2.0, 2.0)
    net = VelocityNet.init(NetConfig(state_dim=2, hidden=(32, 32)), RngState(0))
    net, _ = train_rectified_flow(
        net, standard_normal(2), PointMass(location=location), TrainConfig(steps=3000, batch_size=128, seed=0)
    )
    x0 = distributions.sample(standard_normal(2), 512, RngState(1))
    samples = euler_sample(net, x0, 50).samples
    assert np.mean(np.sum((samples - np.array(location)) ** 2, axis=1)) <= 0.01 * 8.0
