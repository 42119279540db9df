from __future__ import annotations

import asyncio
import hashlib
import logging
import time
from dataclasses import dataclass
from functools import partial
from typing import Mapping, Optional

import numpy as np

from src.app.core.errors import ConfigError, InvariantViolation, ShapeMismatchError
from src.app.core.rng import RngState
from src.app.db.codecs import parameters_checksum
from src.app.db.repositories import PairCacheRepository
from src.app.models.distributions import DistributionSpec
from src.app.models.networks import TrainConfig
from src.app.models.reports import NfeReport
from src.app.models.schedules import Schedule
from src.app.services import distributions
from src.app.services.flow import (
    PairBatch,
    Sampler,
    StoredCoupling,
    euler_sample,
    regression_loss,
    regression_loss_and_grad,
    sample_concurrently,
)
from src.app.services.nn import ForwardCache, Tensor, TimeLike, VelocityNet
from src.app.services.training import LossTrace, fit
from src.app.services.tweedie import ScoreSource, corrected_euler_sample, corrected_targets

logger = logging.getLogger(__name__)


@dataclass
class StudentNet:
    """Одношаговое отображение x0 ↦ x0 + v(x0, 0); с флагом tweedie добавляется поправка."""

    net: VelocityNet
    tweedie: bool = False

    def __call__(self, x: Tensor, t: TimeLike, cond: Optional[Tensor] = None) -> Tensor:
        return self.net(x, t, cond)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def forward_cached(
        self, x: Tensor, t: TimeLike, cond: Optional[Tensor] = None
    ) -> tuple[Tensor, ForwardCache]:
        return self.net.forward_cached(x, t, cond)

    def backward(
        self,
        cache: Optional[ForwardCache],
        grad_out: Tensor,
        hidden_grads: Optional[Mapping[int, Tensor]] = None,
    ) -> tuple[list[Tensor], Tensor]:
        return self.net.backward(cache, grad_out, hidden_grads)


def _distill_targets(
    student: StudentNet, batch: PairBatch, schedule: Optional[Schedule], source: Optional[ScoreSource]
) -> tuple[Tensor, Tensor]:
    zeros = np.zeros(batch.n)
    if not student.tweedie:
        return zeros, batch.displacement
    if schedule is None or source is None:
        raise ConfigError("a Tweedie student needs a schedule and a score source")
    return zeros, corrected_targets(batch.displacement, batch.x0, zeros, schedule, source)


def distill_loss(
    student: StudentNet,
    batch: PairBatch,
    schedule: Optional[Schedule] = None,
    source: Optional[ScoreSource] = None,
) -> float:
    """Среднее ||(x1 − x0) − v(x0, 0)||² по парам учителя."""
    times, targets = _distill_targets(student, batch, schedule, source)
    return regression_loss(student, batch.x0, times, batch.cond, targets)


def distill_loss_and_grad(
    student: StudentNet,
    batch: PairBatch,
    schedule: Optional[Schedule] = None,
    source: Optional[ScoreSource] = None,
) -> tuple[float, list[Tensor]]:
    times, targets = _distill_targets(student, batch, schedule, source)
    return regression_loss_and_grad(student, batch.x0, times, batch.cond, targets)


def pair_cache_key(teacher_checksum: str, prior: DistributionSpec, teacher_steps: int) -> str:
    """Ключ кэша пар: учитель, приор и число шагов его ODE."""
    text = f"{teacher_checksum}:{teacher_steps}:{prior.model_dump_json()}"
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def teacher_pairs(
    teacher: VelocityNet,
    prior: DistributionSpec,
    n: int,
    seed: int,
    *,
    teacher_steps: int = 50,
    cache: Optional[PairCacheRepository] = None,
) -> PairBatch:
    """Пары (x0, ODE_учителя(x0)); кэшируются по ключу ``pair_cache_key`` и сиду."""
    key = pair_cache_key(parameters_checksum(teacher.parameters()), prior, teacher_steps)
    if cache is not None:
        cached = cache.get(key, seed)
        if cached is not None and cached.n >= n:
            logger.info("pair cache hit: key=%s seed=%d", key[:12], seed)
            return cached.take(np.arange(n))
        logger.info("pair cache miss: key=%s seed=%d", key[:12], seed)
    x0 = distributions.sample(prior, n, RngState(seed).derive("distill", "x0"))
    x1 = euler_sample(teacher, x0, teacher_steps).samples
    pairs = PairBatch(x0, x1)
    if cache is not None:
        cache.put(key, seed, pairs)
    return pairs


def distill(
    teacher: VelocityNet,
    schedule: Optional[Schedule],
    source: Optional[ScoreSource],
    cfg: TrainConfig,
    *,
    prior: DistributionSpec,
    tweedie: bool = False,
    n_pairs: int = 4096,
    teacher_steps: int = 50,
    cache: Optional[PairCacheRepository] = None,
) -> tuple[StudentNet, LossTrace]:
    """Дистилляция учителя в одношаговое отображение.

    Ученик инициализируется копией учителя и обучается на закэшированных
    парах; параметры учителя после обучения сверяются побитово.

    Raises:
        ShapeMismatchError: Размерность приора не совпадает с учителем
        InvariantViolation: Параметры учителя изменились
        DivergenceError: Расходимость обучения
    """
    if prior.dim != teacher.config.state_dim:
        raise ShapeMismatchError("prior dimension does not match the teacher")
    before = parameters_checksum(teacher.parameters())
    pairs = teacher_pairs(teacher, prior, n_pairs, cfg.seed, teacher_steps=teacher_steps, cache=cache)
    student = StudentNet(teacher.copy(), tweedie=tweedie)
    source_pairs = StoredCoupling(pairs)

    def objective(step: int, rng: RngState) -> tuple[float, list[Tensor]]:
        batch = source_pairs.draw(cfg.batch_size, rng)
        return distill_loss_and_grad(student, batch, schedule, source)

    trace = fit(student, objective, cfg, RngState(cfg.seed).derive("distill", "student"), label="distill")
    if parameters_checksum(teacher.parameters()) != before:
        raise InvariantViolation("distillation mutated the teacher parameters")
    return student, trace


def k_step_sample(
    student: StudentNet,
    x0: Tensor,
    k: int,
    schedule: Optional[Schedule] = None,
    source: Optional[ScoreSource] = None,
    cond: Optional[Tensor] = None,
    *,
    sampler: Optional[str] = None,
    chunks: int = 1,
) -> tuple[Tensor, NfeReport]:
    """k шагов Эйлера по полю ученика с точным учётом NFE.

    При ``chunks`` > 1 батч делится на куски, которые считаются в потоках;
    результат совпадает с последовательным.
    """
    if k < 1:
        raise ConfigError("k must be at least 1")
    if chunks < 1:
        raise ConfigError("chunks must be at least 1")
    run: Sampler = euler_sample
    if student.tweedie:
        if schedule is None or source is None:
            raise ConfigError("a Tweedie student needs a schedule and a score source")
        run = partial(corrected_euler_sample, schedule=schedule, source=source)
    started = time.perf_counter()
    if chunks > 1:
        result = asyncio.run(sample_concurrently(student, x0, k, cond, chunks=chunks, sampler=run))
    else:
        result = run(student, x0, k, cond=cond)
    seconds = time.perf_counter() - started
    rows = int(np.atleast_2d(x0).shape[0])
    report = NfeReport(
        sampler=sampler or f"student-{k}",
        steps=k,
        samples=rows,
        evaluations=result.nfe,
        seconds=seconds,
        samples_per_second=rows / seconds if seconds > 0 else 0.0,
    )
    return result.samples, report


def timed_sample(
    net: VelocityNet,
    x0: Tensor,
    steps: int,
    *,
    schedule: Optional[Schedule] = None,
    source: Optional[ScoreSource] = None,
    corrected: bool = False,
    cond: Optional[Tensor] = None,
    sampler: str = "teacher",
    chunks: int = 1,
) -> tuple[Tensor, NfeReport]:
    """Выборка учителем (с поправкой или без) с тем же учётом NFE."""
    return k_step_sample(
        StudentNet(net, tweedie=corrected),
        x0,
        steps,
        schedule,
        source,
        cond,
        sampler=f"{sampler}-{steps}",
        chunks=chunks,
    )
