from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pytest

from src.app.core.errors import NumericError, ShapeMismatchError, StateError
from src.app.core.rng import RngState
from src.app.models.networks import NetConfig
from src.app.services.flow import PairBatch, rf_loss_and_grad
from src.app.services.nn import OptimizerState, VelocityNet, grad_check, opt_step, time_features


@dataclass
class Params:
    values: list[np.ndarray] = field(default_factory=lambda: [np.array([1.0])])

    def parameters(self) -> list[np.ndarray]:
        return self.values


def test_single_linear_layer_with_identity_weights_is_identity():
    net = VelocityNet.zeros(NetConfig(state_dim=2, hidden=(), n_freqs=0))
    net.weights[0][...] = np.eye(2)
    np.testing.assert_array_equal(net(np.array([1.0, 2.0]), 0.3), [1.0, 2.0])


def test_parameter_count_matches_config(small_net):
    assert small_net.parameter_count == small_net.config.parameter_count
    assert len(small_net.parameter_names()) == len(small_net.parameters())


def test_time_features_are_sin_cos_pairs():
    feats = time_features(np.array([0.0, 0.25]), 2)
    np.testing.assert_allclose(feats[0], [0.0, 0.0, 1.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(feats[1], [1.0, 0.0, 0.0, -1.0], atol=1e-15)


def test_scalar_weight_gradient():
    net = VelocityNet.zeros(NetConfig(state_dim=1, hidden=(), n_freqs=0))
    net.weights[0][...] = 2.0
    pred, cache = net.forward_cached(np.array([[3.0]]), 0.0)
    grads, _ = net.backward(cache, 2.0 * (pred - 1.0))
    assert grads[0][0, 0] == pytest.approx(30.0)
    assert grads[1][0] == pytest.approx(10.0)


def test_backward_without_forward_raises(small_net):
    with pytest.raises(StateError):
        small_net.backward(None, np.zeros((1, 2)))


def test_condition_rejected_by_unconditional_net(small_net):
    with pytest.raises(ShapeMismatchError):
        small_net(np.zeros((2, 2)), 0.5, np.ones((2, 3)))


def test_missing_condition_rejected(cond_net):
    with pytest.raises(ShapeMismatchError):
        cond_net(np.zeros((2, 2)), 0.5)


def test_init_is_deterministic():
    cfg = NetConfig(state_dim=2, hidden=(5,))
    a = VelocityNet.init(cfg, RngState(3).derive("init"))
    b = VelocityNet.init(cfg, RngState(3).derive("init"))
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa, pb)
    assert not np.any(a.biases[0])


def test_rf_loss_gradient_matches_finite_differences(small_net):
    gen = RngState(5).generator()
    batch = PairBatch(gen.standard_normal((6, 2)), gen.standard_normal((6, 2)))
    times = gen.uniform(size=6)
    assert small_net.parameter_count <= 1000
    error = grad_check(small_net, lambda m: rf_loss_and_grad(m, batch, times), floor=1e-4)
    assert error <= 1e-5


def test_conditional_gradient_matches_finite_differences(cond_net):
    gen = RngState(6).generator()
    batch = PairBatch(gen.standard_normal((5, 2)), gen.standard_normal((5, 2)), gen.standard_normal((5, 3)))
    times = gen.uniform(size=5)
    assert grad_check(cond_net, lambda m: rf_loss_and_grad(m, batch, times), floor=1e-4) <= 1e-5


def test_first_adam_step_moves_by_learning_rate():
    model = Params()
    state = OptimizerState.fresh(model.parameters(), learning_rate=0.1)
    opt_step(model, [np.array([1.0])], state)
    assert model.values[0][0] == pytest.approx(0.9, abs=1e-7)
    assert state.step == 1


def test_zero_gradient_on_fresh_state_changes_nothing():
    model = Params()
    state = OptimizerState.fresh(model.parameters(), learning_rate=0.1)
    opt_step(model, [np.array([0.0])], state)
    assert model.values[0][0] == 1.0
    assert state.m[0][0] == 0.0 and state.v[0][0] == 0.0


def test_zero_gradient_decays_moments():
    model = Params()
    state = OptimizerState.fresh(model.parameters(), learning_rate=0.1)
    opt_step(model, [np.array([1.0])], state)
    m, v = state.m[0].copy(), state.v[0].copy()
    opt_step(model, [np.array([0.0])], state)
    np.testing.assert_allclose(state.m[0], 0.9 * m)
    np.testing.assert_allclose(state.v[0], 0.999 * v)


def test_non_finite_gradient_names_parameter():
    model = Params([np.array([1.0]), np.array([2.0])])
    state = OptimizerState.fresh(model.parameters())
    with pytest.raises(NumericError) as info:
        opt_step(model, [np.array([0.0]), np.array([np.nan])], state)
    assert info.value.index == 1
    assert model.values[0][0] == 1.0


def test_frozen_parameters_untouched():
    model = Params([np.array([1.0]), np.array([2.0])])
    state = OptimizerState.fresh(model.parameters(), learning_rate=0.1)
    opt_step(model, [np.array([1.0]), np.array([1.0])], state, frozen=[True, False])
    assert model.values[0][0] == 1.0
    assert model.values[1][0] != 2.0
