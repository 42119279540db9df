from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pytest

from src.app.core.errors import DivergenceError, NumericError
from src.app.core.rng import RngState
from src.app.models.networks import TrainConfig
from src.app.services.nn import GradientBuffer
from src.app.services.training import LossTrace, clip_by_global_norm, fit, learning_rate_at


@dataclass
class Scalar:
    values: list[np.ndarray] = field(default_factory=lambda: [np.array([0.0])])

    def parameters(self) -> list[np.ndarray]:
        return self.values


def test_cosine_schedule_anneals_to_zero():
    cfg = TrainConfig(steps=11, learning_rate=0.2, lr_schedule="cosine")

    assert learning_rate_at(cfg, 0) == pytest.approx(0.2)
    assert learning_rate_at(cfg, 5) == pytest.approx(0.1)
    assert learning_rate_at(cfg, 10) == pytest.approx(0.0, abs=1e-15)
    assert learning_rate_at(TrainConfig(steps=11, learning_rate=0.2), 10) == 0.2


def test_clip_by_global_norm():
    buffer = GradientBuffer([np.array([3.0]), np.array([4.0])])

    assert clip_by_global_norm(buffer, None) == pytest.approx(5.0)
    np.testing.assert_array_equal(buffer.arrays[0], [3.0])

    assert clip_by_global_norm(buffer, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose([buffer.arrays[0][0], buffer.arrays[1][0]], [0.6, 0.8])


def test_loss_trace_rows_and_average():
    trace = LossTrace(seed=4)
    for value in (1.0, 2.0, 3.0):
        trace.append(value, {"l2": value / 2})

    assert trace.moving_average(2) == [1.0, 1.5, 2.5]
    assert trace.rows()[2] == {"step": 2, "value": 3.0, "seed": 4, "l2": 1.5}


def test_fit_minimizes_a_quadratic():
    model = Scalar()

    def objective(step, rng):
        p = model.values[0]
        return float(np.sum((p - 3.0) ** 2)), [2.0 * (p - 3.0)]

    trace = fit(model, objective, TrainConfig(steps=500, learning_rate=0.05, lr_schedule="cosine"), RngState(0))

    assert len(trace.values) == 500
    assert model.values[0][0] == pytest.approx(3.0, abs=0.05)
    assert trace.values[-1] < trace.values[0]


def test_fit_averages_accumulated_micro_batches():
    calls = []

    def objective(step, rng):
        calls.append(rng.path)
        return (1.0 if len(calls) % 2 else 3.0), [np.zeros(1)]

    trace = fit(Scalar(), objective, TrainConfig(steps=3, grad_accumulation=2), RngState(0))

    assert trace.values == [2.0, 2.0, 2.0]
    assert len(set(calls)) == 6


def test_fit_rejects_non_finite_loss():
    def objective(step, rng):
        return float("nan"), [np.zeros(1)]

    with pytest.raises(NumericError) as info:
        fit(Scalar(), objective, TrainConfig(steps=3), RngState(0))
    assert info.value.step == 0


def test_fit_detects_divergence():
    def objective(step, rng):
        return (1.0 if step == 0 else 1e4), [np.zeros(1)]

    with pytest.raises(DivergenceError):
        fit(Scalar(), objective, TrainConfig(steps=200), RngState(0))
