from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Protocol, Union

import numpy as np

from src.app.core.errors import CapabilityError, ConfigError, NumericError, ShapeMismatchError
from src.app.core.rng import RngState
from src.app.models.distributions import DistributionSpec, IsotropicGaussian
from src.app.models.networks import TrainConfig
from src.app.models.schedules import CustomSchedule, DdpmCosine, RectifiedLinear, Schedule
from src.app.services import distributions
from src.app.services.flow import (
    CountingField,
    PairBatch,
    PairSource,
    SampleResult,
    draw_times,
    interpolate,
    regression_loss,
    regression_loss_and_grad,
)
from src.app.services.nn import Tensor, TimeLike, Trainable, VelocityField, VelocityNet, time_column
from src.app.services.training import LossTrace, fit

logger = logging.getLogger(__name__)

TIME_TOLERANCE = 1e-9
DSM_MAX_TIME = 0.99


def _times(t: TimeLike) -> Tensor:
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ConfigError("schedule time must lie in [0, 1]")
    return arr


def correction_coefficient(schedule: Schedule, t: TimeLike) -> Union[float, Tensor]:
    """Коэффициент поправки 1 − ᾱ_t."""
    tt = _times(t)
    if isinstance(schedule, RectifiedLinear):
        coeff = (1.0 - tt) ** 2
    elif isinstance(schedule, DdpmCosine):
        # ᾱ потока в момент t равно ᾱ DDPM в момент 1 − t
        tau = 1.0 - tt
        f = np.cos((tau + schedule.s) / (1.0 + schedule.s) * math.pi / 2.0) ** 2
        f0 = math.cos(schedule.s / (1.0 + schedule.s) * math.pi / 2.0) ** 2
        coeff = 1.0 - np.clip(f / f0, 0.0, 1.0)
    elif isinstance(schedule, CustomSchedule):
        grid = np.array([p[0] for p in schedule.table])
        values = np.array([p[1] for p in schedule.table])
        coeff = 1.0 - np.interp(tt, grid, values)
    else:
        raise CapabilityError(f"unknown schedule {type(schedule).__name__}")
    return float(coeff) if np.ndim(coeff) == 0 else coeff


def alpha_bar(schedule: Schedule, t: TimeLike) -> Union[float, Tensor]:
    return 1.0 - correction_coefficient(schedule, t)


def is_identity(schedule: Schedule) -> bool:
    return isinstance(schedule, CustomSchedule) and all(a == 1.0 for _, a in schedule.table)


def tweedie_posterior_mean(z: Tensor, coeff: Union[float, Tensor], score_at_z: Tensor) -> Tensor:
    """E[μ | z] = z + coeff·∇log p(z) для скалярной ковариации шума.

    ``coeff`` может быть задан построчно (вектор длины n для батча z).

    Raises:
        ConfigError: Отрицательный коэффициент
        ShapeMismatchError: Формы z и скора различаются
    """
    c = np.asarray(coeff, dtype=np.float64)
    if np.any(c < 0):
        raise ConfigError("Tweedie coefficient must be nonnegative")
    z = np.asarray(z, dtype=np.float64)
    score_at_z = np.asarray(score_at_z, dtype=np.float64)
    if z.shape != score_at_z.shape:
        raise ShapeMismatchError(f"state {z.shape} and score {score_at_z.shape} differ")
    if c.ndim == 1 and z.ndim == 2:
        if c.shape[0] != z.shape[0]:
            raise ShapeMismatchError("one coefficient per row is required")
        c = c[:, None]
    elif c.ndim != 0:
        raise ShapeMismatchError("coefficient must be a scalar or one value per row")
    return z + c * score_at_z


class ScoreSource(Protocol):
    def score(self, x: Tensor, t: TimeLike) -> Tensor: ...


@dataclass(frozen=True)
class AnalyticScore:
    prior: DistributionSpec
    target: DistributionSpec

    def __post_init__(self) -> None:
        if not isinstance(self.prior, IsotropicGaussian):
            raise CapabilityError("analytic score needs an isotropic Gaussian prior")
        distributions.as_mixture(self.target)

    def score(self, x: Tensor, t: TimeLike) -> Tensor:
        return distributions.marginal_interp_score(self.prior, self.target, x, t)


@dataclass(frozen=True)
class LearnedScore:
    net: VelocityNet

    def score(self, x: Tensor, t: TimeLike) -> Tensor:
        return self.net(x, t)


def corrected_targets(
    displacement: Tensor, xt: Tensor, tt: Tensor, schedule: Schedule, source: ScoreSource
) -> Tensor:
    coeff = correction_coefficient(schedule, tt)
    active = coeff > 0.0
    if not np.any(active):
        return displacement
    score = source.score(xt[active], tt[active])
    if not np.all(np.isfinite(score)):
        raise NumericError("score is not finite on the batch")
    targets = displacement.copy()
    targets[active] -= coeff[active, None] * score
    return targets


def corrected_rf_loss(
    net: VelocityField, batch: PairBatch, times: Tensor, schedule: Schedule, source: ScoreSource
) -> float:
    """Среднее ||(x1 − x0) − v(x_t, t) − (1 − ᾱ_t)∇log p(x_t)||²."""
    tt = time_column(_times(times), batch.n)
    xt = interpolate(batch.x0, batch.x1, tt)
    targets = corrected_targets(batch.displacement, xt, tt, schedule, source)
    return regression_loss(net, xt, tt, batch.cond, targets)


def corrected_rf_loss_and_grad(
    net: Trainable, batch: PairBatch, times: Tensor, schedule: Schedule, source: ScoreSource
) -> tuple[float, list[Tensor]]:
    tt = time_column(_times(times), batch.n)
    xt = interpolate(batch.x0, batch.x1, tt)
    targets = corrected_targets(batch.displacement, xt, tt, schedule, source)
    return regression_loss_and_grad(net, xt, tt, batch.cond, targets)


def train_corrected_flow(
    net: Trainable,
    source: PairSource,
    cfg: TrainConfig,
    schedule: Schedule,
    score: ScoreSource,
    *,
    label: str = "corrected-flow",
) -> LossTrace:
    def objective(step: int, rng: RngState) -> tuple[float, list[Tensor]]:
        batch = source.draw(cfg.batch_size, rng.derive("pairs"))
        return corrected_rf_loss_and_grad(net, batch, draw_times(batch.n, rng), schedule, score)

    return fit(net, objective, cfg, RngState(cfg.seed).derive("flow", label), label=label)


def corrected_ode_step(
    net: VelocityField,
    x: Tensor,
    t: float,
    dt: float,
    schedule: Schedule,
    source: ScoreSource,
    cond: Optional[Tensor] = None,
) -> Tensor:
    """Шаг Эйлера поля v(x, t) + (1 − ᾱ_t)∇log p(x)."""
    if t < 0.0 or t + dt > 1.0 + TIME_TOLERANCE or dt <= 0.0:
        raise ConfigError(f"step [{t}, {t + dt}] leaves [0, 1]")
    drift = net(x, t, cond)
    coeff = correction_coefficient(schedule, t)
    if coeff != 0.0:
        drift = drift + coeff * source.score(x, t)
    if not np.all(np.isfinite(drift)):
        raise NumericError(f"corrected drift is not finite at t={t:.4f}")
    return x + dt * drift


def corrected_one_step(
    net: VelocityField, x0: Tensor, schedule: Schedule, source: ScoreSource, cond: Optional[Tensor] = None
) -> Tensor:
    return corrected_ode_step(net, x0, 0.0, 1.0, schedule, source, cond)


def corrected_euler_sample(
    net: VelocityField,
    x0: Tensor,
    n_steps: int,
    schedule: Schedule,
    source: ScoreSource,
    cond: Optional[Tensor] = None,
) -> SampleResult:
    if n_steps < 1:
        raise ConfigError("n_steps must be at least 1")
    counter = CountingField(net)
    x = np.array(x0, dtype=np.float64)
    dt = 1.0 / n_steps
    for i in range(n_steps):
        try:
            x = corrected_ode_step(counter, x, i / n_steps, dt, schedule, source, cond)
        except NumericError as exc:
            raise NumericError(str(exc), step=i) from exc
    return SampleResult(x, n_steps, counter.evaluations)


def dsm_loss_and_grad(
    net: Trainable, xt: Tensor, times: Tensor, sigma: Tensor, noise: Tensor
) -> tuple[float, list[Tensor]]:
    pred, cache = net.forward_cached(xt, times)
    resid = sigma[:, None] * pred + noise
    n = resid.shape[0]
    grads, _ = net.backward(cache, 2.0 * sigma[:, None] * resid / n)
    return float(np.mean(np.sum(resid * resid, axis=1))), grads


def train_score_dsm(
    score_net: VelocityNet, prior: DistributionSpec, target: DistributionSpec, cfg: TrainConfig
) -> tuple[VelocityNet, LossTrace]:
    """Denoising score matching на маргинале интерполяции (1 − t)x0 + t·x1.

    Условный скор равен −ξ/σ_t при x0 = m0 + √v0·ξ и σ_t = (1 − t)√v0;
    минимизируется взвешенная потеря ||σ_t s(x_t, t) + ξ||².
    """
    if not isinstance(prior, IsotropicGaussian):
        raise CapabilityError("score matching needs an isotropic Gaussian prior")
    if score_net.config.state_dim != prior.dim or target.dim != prior.dim:
        raise ShapeMismatchError("score network, prior and target dimensions must agree")
    mean = np.asarray(prior.mean, dtype=np.float64)
    std = math.sqrt(prior.variance)

    def objective(step: int, rng: RngState) -> tuple[float, list[Tensor]]:
        gen = rng.derive("dsm").generator()
        noise = gen.standard_normal((cfg.batch_size, prior.dim))
        times = gen.uniform(0.0, DSM_MAX_TIME, size=cfg.batch_size)
        x1 = distributions.sample(target, cfg.batch_size, rng.derive("x1"))
        x0 = mean + std * noise
        xt = interpolate(x0, x1, times)
        return dsm_loss_and_grad(score_net, xt, times, (1.0 - times) * std, noise)

    trace = fit(score_net, objective, cfg, RngState(cfg.seed).derive("score", "dsm"), label="score-dsm")
    return score_net, trace
