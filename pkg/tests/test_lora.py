from __future__ import annotations

import numpy as np
import pytest

from src.app.core.errors import ConfigError, ShapeMismatchError
from src.app.core.rng import RngState
from src.app.models.networks import NetConfig
from src.app.services.flow import PairBatch, rf_loss_and_grad
from src.app.services.lora import AdapterSet, LoraNetwork, lora_forward
from src.app.services.nn import VelocityNet, grad_check


def test_zero_initialized_adapters_are_neutral(small_net):
    adapters = AdapterSet.init(small_net, 2, RngState(0))
    x = RngState(1).generator().standard_normal((5, 2))
    np.testing.assert_array_equal(lora_forward(small_net, adapters, x, 0.4), small_net(x, 0.4))


def test_default_adapters_skip_output_layer(small_net):
    adapters = AdapterSet.init(small_net, 3, RngState(0))
    assert adapters.layers == (0, 1)
    assert adapters.scale == 1.0


def test_trainable_count_law(small_net):
    rank = 3
    adapters = AdapterSet.init(small_net, rank, RngState(0))
    expected = sum(rank * (rows + cols) for rows, cols in (small_net.weights[k].shape for k in adapters.layers))
    assert adapters.trainable_count == expected


def test_full_rank_adapter_reproduces_weight_update(small_net):
    layer = 1
    delta = RngState(2).generator().standard_normal(small_net.weights[layer].shape)
    u, s, vt = np.linalg.svd(delta)
    rank = len(s)
    adapters = AdapterSet(rank, float(rank), (layer,), [u[:, :rank] * s], [vt[:rank]])
    updated = small_net.copy()
    updated.weights[layer] = small_net.weights[layer] + delta
    x = RngState(3).generator().standard_normal((4, 2))
    np.testing.assert_allclose(LoraNetwork(small_net, adapters)(x, 0.2), updated(x, 0.2), atol=1e-12)
    np.testing.assert_allclose(LoraNetwork(small_net, adapters).merged()(x, 0.2), updated(x, 0.2), atol=1e-12)


def test_adapter_gradient_with_nonzero_b(small_net):
    adapters = AdapterSet.init(small_net, 2, RngState(4))
    for b in adapters.b:
        b[...] = RngState(5).generator().standard_normal(b.shape) * 0.3
    network = LoraNetwork(small_net, adapters)
    gen = RngState(6).generator()
    batch = PairBatch(gen.standard_normal((6, 2)), gen.standard_normal((6, 2)))
    times = gen.uniform(size=6)
    assert grad_check(network, lambda m: rf_loss_and_grad(m, batch, times), floor=1e-4) <= 1e-5


def test_only_adapters_receive_gradients(small_net):
    network = LoraNetwork(small_net, AdapterSet.init(small_net, 2, RngState(0)))
    batch = PairBatch(np.zeros((2, 2)), np.ones((2, 2)))
    _, grads = rf_loss_and_grad(network, batch, np.array([0.2, 0.7]))
    assert [g.shape for g in grads] == [p.shape for p in network.parameters()]
    assert len(grads) == 4


def test_rank_must_be_positive(small_net):
    with pytest.raises(ConfigError):
        AdapterSet.init(small_net, 0, RngState(0))


def test_layer_out_of_range(small_net):
    with pytest.raises(ConfigError):
        AdapterSet.init(small_net, 2, RngState(0), layers=(7,))


def test_adapters_for_another_base_rejected(small_net):
    other = VelocityNet.init(NetConfig(state_dim=2, hidden=(5, 5)), RngState(0))
    with pytest.raises(ShapeMismatchError):
        LoraNetwork(other, AdapterSet.init(small_net, 2, RngState(0)))
