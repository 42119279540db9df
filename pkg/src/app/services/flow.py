from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from src.app.core.errors import ConfigError, NumericError, ShapeMismatchError
from src.app.core.rng import RngState
from src.app.models.distributions import DistributionSpec
from src.app.models.networks import TrainConfig
from src.app.services import distributions
from src.app.services.nn import Tensor, TimeLike, Trainable, VelocityField, VelocityNet
from src.app.services.training import LossTrace, fit

logger = logging.getLogger(__name__)


@dataclass
class PairBatch:
    x0: Tensor
    x1: Tensor
    cond: Optional[Tensor] = None

    def __post_init__(self) -> None:
        self.x0 = np.atleast_2d(np.asarray(self.x0, dtype=np.float64))
        self.x1 = np.atleast_2d(np.asarray(self.x1, dtype=np.float64))
        if self.x0.shape != self.x1.shape:
            raise ShapeMismatchError(f"pair shapes differ: {self.x0.shape} vs {self.x1.shape}")
        if self.cond is not None:
            self.cond = np.atleast_2d(np.asarray(self.cond, dtype=np.float64))
            if self.cond.shape[0] != self.x0.shape[0]:
                raise ShapeMismatchError("condition rows do not match pair rows")

    @property
    def n(self) -> int:
        return int(self.x0.shape[0])

    @property
    def displacement(self) -> Tensor:
        return self.x1 - self.x0

    def take(self, rows: Tensor) -> "PairBatch":
        return PairBatch(self.x0[rows], self.x1[rows], None if self.cond is None else self.cond[rows])


@dataclass
class CountingField:
    """Обёртка, считающая вычисления поля построчно (NFE)."""

    inner: VelocityField
    evaluations: int = 0
    calls: int = 0

    def __call__(self, x: Tensor, t: TimeLike, cond: Optional[Tensor] = None) -> Tensor:
        self.calls += 1
        self.evaluations += int(np.atleast_2d(x).shape[0])
        return self.inner(x, t, cond)


@dataclass
class SampleResult:
    samples: Tensor
    n_steps: int
    nfe: int
    trajectory: list[Tensor] = field(default_factory=list)


def interpolate(x0: Tensor, x1: Tensor, t: TimeLike) -> Tensor:
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ShapeMismatchError(f"cannot interpolate {x0.shape} and {x1.shape}")
    tt = np.asarray(t, dtype=np.float64)
    if np.any(tt < 0.0) or np.any(tt > 1.0):
        raise ConfigError("interpolation time must lie in [0, 1]")
    if tt.ndim == 1 and x0.ndim == 2:
        tt = tt[:, None]
    return (1.0 - tt) * x0 + tt * x1


def regression_loss(
    net: VelocityField, x: Tensor, times: Tensor, cond: Optional[Tensor], targets: Tensor
) -> float:
    pred = net(x, times, cond)
    if not np.all(np.isfinite(pred)):
        raise NumericError("network output is not finite")
    resid = targets - pred
    return float(np.mean(np.sum(resid * resid, axis=1)))


def regression_loss_and_grad(
    net: Trainable, x: Tensor, times: Tensor, cond: Optional[Tensor], targets: Tensor
) -> tuple[float, list[Tensor]]:
    pred, cache = net.forward_cached(x, times, cond)
    if not np.all(np.isfinite(pred)):
        raise NumericError("network output is not finite")
    resid = targets - pred
    n = resid.shape[0]
    grads, _ = net.backward(cache, -2.0 * resid / n)
    return float(np.mean(np.sum(resid * resid, axis=1))), grads


def _check_times(times: Tensor, n: int) -> Tensor:
    tt = np.asarray(times, dtype=np.float64).reshape(-1)
    if tt.shape[0] != n:
        raise ShapeMismatchError("one time per pair is required")
    if np.any(tt < 0.0) or np.any(tt > 1.0):
        raise ConfigError("times must lie in [0, 1]")
    return tt


def rf_loss(net: VelocityField, batch: PairBatch, times: Tensor) -> float:
    """Среднее ||(x1 − x0) − v(x_t, t)||² по батчу."""
    tt = _check_times(times, batch.n)
    xt = interpolate(batch.x0, batch.x1, tt)
    return regression_loss(net, xt, tt, batch.cond, batch.displacement)


def rf_loss_and_grad(net: Trainable, batch: PairBatch, times: Tensor) -> tuple[float, list[Tensor]]:
    tt = _check_times(times, batch.n)
    xt = interpolate(batch.x0, batch.x1, tt)
    return regression_loss_and_grad(net, xt, tt, batch.cond, batch.displacement)


class PairSource(Protocol):
    def draw(self, n: int, rng: RngState) -> PairBatch: ...


@dataclass(frozen=True)
class IndependentCoupling:
    prior: DistributionSpec
    target: DistributionSpec

    def draw(self, n: int, rng: RngState) -> PairBatch:
        return PairBatch(
            distributions.sample(self.prior, n, rng.derive("x0")),
            distributions.sample(self.target, n, rng.derive("x1")),
        )


@dataclass(frozen=True)
class DataCoupling:
    """Приор против строк набора данных (с условиями, если есть)."""

    prior: DistributionSpec
    data: Tensor
    cond: Optional[Tensor] = None

    def draw(self, n: int, rng: RngState) -> PairBatch:
        rows = rng.derive("rows").generator().integers(0, self.data.shape[0], size=n)
        return PairBatch(
            distributions.sample(self.prior, n, rng.derive("x0")),
            self.data[rows],
            None if self.cond is None else self.cond[rows],
        )


@dataclass(frozen=True)
class StoredCoupling:
    pairs: PairBatch

    def draw(self, n: int, rng: RngState) -> PairBatch:
        rows = rng.derive("rows").generator().integers(0, self.pairs.n, size=n)
        return self.pairs.take(rows)


def draw_times(n: int, rng: RngState) -> Tensor:
    return rng.derive("t").generator().uniform(0.0, 1.0, size=n)


def train_flow(
    net: Trainable, source: PairSource, cfg: TrainConfig, *, label: str = "rectified-flow"
) -> LossTrace:
    """Минимизирует среднюю квадратичную ошибку скорости на парах из ``source``."""

    def objective(step: int, rng: RngState) -> tuple[float, list[Tensor]]:
        batch = source.draw(cfg.batch_size, rng.derive("pairs"))
        return rf_loss_and_grad(net, batch, draw_times(batch.n, rng))

    trace = fit(net, objective, cfg, RngState(cfg.seed).derive("flow", label), label=label)
    if trace.values:
        smoothed = trace.moving_average(100)
        if smoothed[-1] >= trace.values[0]:
            logger.warning("%s: final moving-average loss %.4g did not drop below %.4g", label, smoothed[-1], trace.values[0])
    return trace


def train_rectified_flow(
    net: VelocityNet, prior: DistributionSpec, target: DistributionSpec, cfg: TrainConfig
) -> tuple[VelocityNet, LossTrace]:
    if cfg.steps < 1:
        raise ConfigError("flow training needs at least one step")
    if prior.dim != target.dim or prior.dim != net.config.state_dim:
        raise ShapeMismatchError("prior, target and network dimensions must agree")
    trace = train_flow(net, IndependentCoupling(prior, target), cfg)
    return net, trace


def euler_sample(
    net: VelocityField,
    x0: Tensor,
    n_steps: int,
    cond: Optional[Tensor] = None,
    *,
    keep_trajectory: bool = False,
) -> SampleResult:
    """Явный Эйлер на равномерной сетке t_i = i/n_steps (скорость в левом конце)."""
    if n_steps < 1:
        raise ConfigError("n_steps must be at least 1")
    counter = CountingField(net)
    x = np.array(x0, dtype=np.float64)
    dt = 1.0 / n_steps
    trajectory = [x.copy()] if keep_trajectory else []
    for i in range(n_steps):
        x = x + dt * counter(x, i / n_steps, cond)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"state became non-finite at step {i}", step=i)
        if keep_trajectory:
            trajectory.append(x.copy())
    return SampleResult(x, n_steps, counter.evaluations, trajectory)


Sampler = Callable[..., SampleResult]


async def sample_concurrently(
    net: VelocityField,
    x0: Tensor,
    n_steps: int,
    cond: Optional[Tensor] = None,
    *,
    chunks: int = 4,
    sampler: Sampler = euler_sample,
) -> SampleResult:
    """Параллельная выборка по кускам батча; результат не зависит от планировщика.

    Args:
        net: Поле скорости (только чтение)
        x0: Начальные точки (n, d)
        n_steps: Шагов на сэмпл
        cond: Условие по строкам или одна строка на весь батч
        chunks: Число кусков
        sampler: ``sampler(net, x0, n_steps, cond=...)``, по умолчанию Эйлер
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if cond is not None:
        cond = np.atleast_2d(cond)
        cond = np.broadcast_to(cond, (x0.shape[0], cond.shape[-1]))
    rows = np.array_split(np.arange(x0.shape[0]), max(1, chunks))
    rows = [r for r in rows if r.size]
    jobs = [
        asyncio.to_thread(sampler, net, x0[r], n_steps, cond=None if cond is None else cond[r]) for r in rows
    ]
    results = await asyncio.gather(*jobs)
    return SampleResult(
        np.concatenate([res.samples for res in results], axis=0),
        n_steps,
        sum(res.nfe for res in results),
    )


def reflow_repair(
    net: VelocityField,
    prior: DistributionSpec,
    n: int,
    rng: RngState,
    *,
    n_steps: int = 50,
    cond: Optional[Tensor] = None,
) -> PairBatch:
    """Новая связка (x0, ODE(x0)) для следующего раунда обучения."""
    x0 = distributions.sample(prior, n, rng.derive("reflow", "x0"))
    x1 = euler_sample(net, x0, n_steps, cond).samples
    return PairBatch(x0, x1, cond)


def straightness(net: VelocityField, pairs: PairBatch, grid_size: int = 16) -> float:
    if grid_size < 2:
        raise ConfigError("grid_size must be at least 2")
    disp = pairs.displacement
    total = 0.0
    for t in np.linspace(0.0, 1.0, grid_size):
        xt = interpolate(pairs.x0, pairs.x1, float(t))
        resid = disp - net(xt, float(t), pairs.cond)
        total += float(np.mean(np.sum(resid * resid, axis=1)))
    return total / grid_size


def straightness_sweep(net: VelocityField, pairs: PairBatch, times: Sequence[float]) -> list[dict[str, float]]:
    rows = []
    for t in times:
        xt = interpolate(pairs.x0, pairs.x1, float(t))
        resid = pairs.displacement - net(xt, float(t), pairs.cond)
        rows.append({"t": float(t), "value": float(np.mean(np.sum(resid * resid, axis=1)))})
    return rows
