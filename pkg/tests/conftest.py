from __future__ import annotations

import os

os.environ.setdefault("LAB_PROGRESS", "0")
os.environ.setdefault("LAB_WORKERS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from src.app.core.rng import RngState  # noqa: E402
from src.app.models.networks import NetConfig  # noqa: E402
from src.app.services.nn import VelocityNet  # noqa: E402


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption("--runslow", action="store_true", default=False, help="запускать медленные эксперименты")


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="нужен --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng() -> RngState:
    return RngState(1234)


@pytest.fixture
def small_net() -> VelocityNet:
    """Сеть 2D → 2D с ≤ 1000 параметрами для проверок градиента."""
    return VelocityNet.init(NetConfig(state_dim=2, hidden=(8, 8), n_freqs=2), RngState(7).derive("net"))


@pytest.fixture
def cond_net() -> VelocityNet:
    return VelocityNet.init(NetConfig(state_dim=2, cond_dim=3, hidden=(6,), n_freqs=1), RngState(8).derive("net"))


def constant_net(value: np.ndarray, hidden: tuple[int, ...] = (4,)) -> VelocityNet:
    """v ≡ value: нулевые веса и смещение на выходе."""
    value = np.asarray(value, dtype=np.float64)
    net = VelocityNet.zeros(NetConfig(state_dim=value.size, hidden=hidden, n_freqs=1))
    net.biases[-1][...] = value
    return net
