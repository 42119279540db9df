from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional, Sequence, TypeVar

import numpy as np

from src.app.core.errors import ConfigError, ShapeMismatchError
from src.app.services.nn import Parametrized, Tensor

logger = logging.getLogger(__name__)

Batch = TypeVar("Batch")
BatchLoss = Callable[[Parametrized, Batch], tuple[float, Sequence[Tensor]]]


class LayerMode(str, Enum):
    FREE = "free"
    ANCHORED = "anchored"
    FROZEN = "frozen"


def layer_of(param_index: int) -> int:
    # параметры идут парами (W_l, b_l)
    return param_index // 2


def ewc_fisher(
    model: Parametrized, batch_loss: BatchLoss, batches: Iterable[Batch], n_batches: int
) -> list[Tensor]:
    """Эмпирическая диагональ Фишера: среднее квадратов градиентов якорной потери по батчам.

    Сумма берётся по отсортированным значениям каждой позиции, поэтому
    результат побитово не зависит от порядка батчей.

    Raises:
        ConfigError: n_batches = 0 или батчей меньше, чем запрошено
    """
    if n_batches < 1:
        raise ConfigError("Fisher estimate needs at least one batch")
    squares: list[list[Tensor]] = []
    for idx, batch in enumerate(batches):
        if idx >= n_batches:
            break
        _, grads = batch_loss(model, batch)
        squares.append([np.asarray(g, dtype=np.float64) ** 2 for g in grads])
    if len(squares) < n_batches:
        raise ConfigError(f"batch stream ended after {len(squares)} of {n_batches} batches")
    fisher = []
    for p_idx in range(len(squares[0])):
        stacked = np.sort(np.stack([sq[p_idx] for sq in squares]), axis=0)
        fisher.append(stacked.sum(axis=0) / n_batches)
    return fisher


def select_layer_modes(
    fisher: Sequence[Tensor], n_layers: int, frozen_layers: Sequence[int] = ()
) -> list[LayerMode]:
    """Слои с средним Фишером в нижней четверти размораживаются полностью."""
    means = np.array(
        [np.mean(np.concatenate([fisher[2 * k].ravel(), fisher[2 * k + 1].ravel()])) for k in range(n_layers)]
    )
    cutoff = float(np.quantile(means, 0.25))
    modes = [LayerMode.FREE if m <= cutoff else LayerMode.ANCHORED for m in means]
    for layer in frozen_layers:
        if not 0 <= layer < n_layers:
            raise ConfigError(f"frozen layer {layer} out of range")
        modes[layer] = LayerMode.FROZEN
    logger.info("EWC layer modes: %s", [m.value for m in modes])
    return modes


@dataclass
class EwcState:
    anchor: list[Tensor]
    fisher: list[Tensor]
    strength: float
    layer_modes: list[LayerMode] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.strength < 0:
            raise ConfigError("EWC strength must be nonnegative")
        if len(self.anchor) != len(self.fisher):
            raise ShapeMismatchError("Fisher diagonal does not mirror the anchor")
        for a, f in zip(self.anchor, self.fisher):
            if a.shape != f.shape:
                raise ShapeMismatchError(f"Fisher shape {f.shape} != anchor shape {a.shape}")
            if np.any(f < 0):
                raise ConfigError("Fisher entries must be nonnegative")
        if not self.layer_modes:
            self.layer_modes = [LayerMode.ANCHORED] * ((len(self.anchor) + 1) // 2)

    @classmethod
    def capture(
        cls,
        model: Parametrized,
        fisher: Sequence[Tensor],
        strength: float,
        layer_modes: Optional[Sequence[LayerMode]] = None,
    ) -> "EwcState":
        return cls([p.copy() for p in model.parameters()], [np.asarray(f) for f in fisher], strength, list(layer_modes or []))

    def penalized(self) -> list[bool]:
        return [self.layer_modes[layer_of(i)] != LayerMode.FREE for i in range(len(self.anchor))]

    def frozen_mask(self) -> list[bool]:
        return [self.layer_modes[layer_of(i)] == LayerMode.FROZEN for i in range(len(self.anchor))]


def _check(model: Parametrized, state: EwcState) -> list[Tensor]:
    params = model.parameters()
    if len(params) != len(state.anchor) or any(p.shape != a.shape for p, a in zip(params, state.anchor)):
        raise ShapeMismatchError("model parameters do not match the EWC anchor")
    return params


def ewc_penalty(model: Parametrized, state: EwcState) -> float:
    """(λ/2)·Σ F_i(θ_i − θ*_i)² по всем слоям, кроме свободных (FREE)."""
    params = _check(model, state)
    total = 0.0
    for p, a, f, on in zip(params, state.anchor, state.fisher, state.penalized()):
        if on:
            d = p - a
            total += float(np.sum(f * d * d))
    return 0.5 * state.strength * total


def ewc_penalty_grad(model: Parametrized, state: EwcState) -> list[Tensor]:
    params = _check(model, state)
    return [
        state.strength * f * (p - a) if on else np.zeros_like(p)
        for p, a, f, on in zip(params, state.anchor, state.fisher, state.penalized())
    ]
