from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from tqdm.auto import tqdm

from src.app.core.config import settings
from src.app.core.errors import DivergenceError, NumericError
from src.app.core.rng import RngState
from src.app.models.networks import TrainConfig
from src.app.services.nn import GradientBuffer, OptimizerState, Parametrized, Tensor, opt_step

logger = logging.getLogger(__name__)

Objective = Callable[[int, RngState], tuple[float, Sequence[Tensor]]]

DIVERGENCE_FACTOR = 1e3
DIVERGENCE_PATIENCE = 100


@dataclass
class LossTrace:
    seed: int
    values: list[float] = field(default_factory=list)
    components: dict[str, list[float]] = field(default_factory=dict)

    def append(self, value: float, components: Optional[dict[str, float]] = None) -> None:
        self.values.append(value)
        for name, comp in (components or {}).items():
            self.components.setdefault(name, []).append(comp)

    def moving_average(self, window: int = 100) -> list[float]:
        if not self.values:
            return []
        arr = np.asarray(self.values)
        csum = np.cumsum(np.insert(arr, 0, 0.0))
        out = []
        for end in range(1, arr.size + 1):
            start = max(0, end - window)
            out.append(float((csum[end] - csum[start]) / (end - start)))
        return out

    def rows(self) -> list[dict[str, float]]:
        rows = []
        for step, value in enumerate(self.values):
            row: dict[str, float] = {"step": step, "value": value, "seed": self.seed}
            for name, comps in self.components.items():
                row[name] = comps[step]
            rows.append(row)
        return rows


def learning_rate_at(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_schedule == "cosine" and cfg.steps > 1:
        return 0.5 * cfg.learning_rate * (1.0 + math.cos(math.pi * step / (cfg.steps - 1)))
    return cfg.learning_rate


def clip_by_global_norm(grads: GradientBuffer, max_norm: Optional[float]) -> float:
    norm = grads.global_norm()
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.arrays:
            g *= scale
    return norm


def fit(
    model: Parametrized,
    objective: Objective,
    cfg: TrainConfig,
    rng: RngState,
    *,
    label: str = "train",
    frozen: Optional[Sequence[bool]] = None,
    components: Optional[Callable[[], dict[str, float]]] = None,
) -> LossTrace:
    """Общий цикл обучения: накопление, клиппинг, косинусный lr, контроль расходимости.

    Args:
        model: Объект с ``parameters()``; обновляется на месте
        objective: ``(step, rng) -> (loss, grads)`` для одного микро-батча
        cfg: Параметры оптимизации
        rng: Корень потока случайности этого обучения
        label: Имя для логов и прогресс-бара
        frozen: Маска параметров, которые не обновляются
        components: Источник компонент потерь последнего вызова (для трасс)

    Returns:
        LossTrace: Значение потерь на каждом шаге

    Raises:
        NumericError: Нефинитные потери или градиенты
        DivergenceError: Потери выше 1e3 от начальных 100 шагов подряд
    """
    trace = LossTrace(seed=cfg.seed)
    state = OptimizerState.fresh(model.parameters(), cfg)
    initial: Optional[float] = None
    over = 0
    steps = range(cfg.steps)
    bar = tqdm(steps, desc=label, leave=False, disable=not settings.PROGRESS or cfg.steps == 0)
    for step in bar:
        buffer = GradientBuffer.zeros_like(model.parameters())
        total = 0.0
        comps: dict[str, float] = {}
        for micro in range(cfg.grad_accumulation):
            value, grads = objective(step, rng.derive(step, micro))
            buffer.add_(grads, 1.0 / cfg.grad_accumulation)
            total += value / cfg.grad_accumulation
            if components is not None:
                for name, comp in components().items():
                    comps[name] = comps.get(name, 0.0) + comp / cfg.grad_accumulation
        if not math.isfinite(total):
            raise NumericError(f"{label}: loss is not finite", step=step)
        trace.append(total, comps)

        if initial is None:
            initial = max(total, 1e-300)
        over = over + 1 if total > DIVERGENCE_FACTOR * initial else 0
        if over >= DIVERGENCE_PATIENCE:
            raise DivergenceError(f"{label}: loss above {DIVERGENCE_FACTOR:g}x initial for {over} steps", step=step)

        clip_by_global_norm(buffer, cfg.grad_clip)
        lr = learning_rate_at(cfg, step)
        opt_step(model, buffer.arrays, state, learning_rate=lr, frozen=frozen)
        if (step + 1) % cfg.log_every == 0:
            logger.info("%s step %d/%d loss=%.6g lr=%.3g", label, step + 1, cfg.steps, total, lr)
    return trace
