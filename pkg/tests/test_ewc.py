from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from src.app.core.errors import ConfigError, ShapeMismatchError
from src.app.services.ewc import (
    EwcState,
    LayerMode,
    ewc_fisher,
    ewc_penalty,
    ewc_penalty_grad,
    select_layer_modes,
)
from src.app.services.nn import grad_check


@dataclass
class Scalar:
    w: np.ndarray

    def parameters(self):
        return [self.w]


def squared_error(model, batch):
    x, y = batch
    resid = model.w[0] * x - y
    return float(resid**2), [np.array([2.0 * resid * x])]


def test_zero_gradient_loss_has_zero_fisher():
    model = Scalar(np.array([1.0]))
    fisher = ewc_fisher(model, lambda m, b: (0.0, [np.zeros(1)]), [None] * 3, 3)
    np.testing.assert_array_equal(fisher[0], [0.0])


def test_scalar_fisher():
    model = Scalar(np.array([1.0]))
    fisher = ewc_fisher(model, squared_error, [(1.0, 0.0)], 1)
    assert fisher[0][0] == pytest.approx(4.0)


def test_fisher_is_independent_of_batch_order():
    model = Scalar(np.array([0.7]))
    batches = [(x, 0.1 * x) for x in np.linspace(-2.0, 3.0, 9)]
    forward = ewc_fisher(model, squared_error, batches, 9)
    backward = ewc_fisher(model, squared_error, list(reversed(batches)), 9)
    np.testing.assert_array_equal(forward[0], backward[0])


def test_fisher_needs_enough_batches():
    with pytest.raises(ConfigError):
        ewc_fisher(Scalar(np.array([1.0])), squared_error, [(1.0, 0.0)], 2)
    with pytest.raises(ConfigError):
        ewc_fisher(Scalar(np.array([1.0])), squared_error, [], 0)


def test_penalty_at_anchor_is_zero():
    model = Scalar(np.array([1.0, 2.0]))
    state = EwcState.capture(model, [np.ones(2)], 3.0)
    assert ewc_penalty(model, state) == 0.0


def test_penalty_unit_example_and_quadratic_growth():
    model = Scalar(np.array([1.0, 1.0]))
    state = EwcState([np.zeros(2)], [np.ones(2)], 1.0)
    assert ewc_penalty(model, state) == pytest.approx(1.0)
    model.w *= 2.0
    assert ewc_penalty(model, state) == pytest.approx(4.0)


def test_penalty_gradient():
    gen = np.random.default_rng(0)
    model = Scalar(gen.standard_normal(5))
    state = EwcState([gen.standard_normal(5)], [gen.uniform(size=5)], 2.5)
    assert grad_check(model, lambda m: (ewc_penalty(m, state), ewc_penalty_grad(m, state))) <= 1e-6


def test_free_layers_are_not_penalized():
    model = Scalar(np.array([5.0]))
    state = EwcState([np.zeros(1)], [np.ones(1)], 1.0, [LayerMode.FREE])
    assert ewc_penalty(model, state) == 0.0
    assert state.frozen_mask() == [False]


def test_state_rejects_mismatched_fisher():
    with pytest.raises(ShapeMismatchError):
        EwcState([np.zeros(2)], [np.zeros(3)], 1.0)
    with pytest.raises(ConfigError):
        EwcState([np.zeros(1)], [np.ones(1)], -1.0)


def test_layer_modes_free_lowest_quartile_and_freeze_requested():
    fisher = []
    for level in (0.001, 1.0, 2.0, 3.0):
        fisher.extend((np.full((2, 2), level), np.full(2, level)))
    modes = select_layer_modes(fisher, 4, frozen_layers=(3,))
    assert modes == [LayerMode.FREE, LayerMode.ANCHORED, LayerMode.ANCHORED, LayerMode.FROZEN]


def test_layer_modes_reject_unknown_layer():
    with pytest.raises(ConfigError):
        select_layer_modes([np.ones(1), np.ones(1)], 1, frozen_layers=(2,))
