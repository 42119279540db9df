from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from src.app.core.errors import ConfigError, InvariantViolation, ShapeMismatchError
from src.app.core.rng import RngState
from src.app.db.codecs import parameters_checksum
from src.app.models.experiments import Stage2Weights
from src.app.models.networks import TrainConfig
from src.app.services.lora import AdapterSet, LoraNetwork
from src.app.services.nn import Tensor, VelocityNet
from src.app.services.stage1 import (
    Rollout,
    StageBatch,
    generate,
    make_stage_batch,
    reconstruction_terms,
    rollout,
    rollout_backward,
)
from src.app.services.training import LossTrace, fit

logger = logging.getLogger(__name__)


def _mean_sq(x: Tensor) -> float:
    return float(np.mean(np.sum(x * x, axis=1)))


def _layers(n_hidden: int, layers: Optional[Sequence[int]]) -> list[int]:
    chosen = list(range(n_hidden)) if layers is None else list(layers)
    if any(not 0 <= layer < n_hidden for layer in chosen):
        raise ConfigError(f"consistency layers {chosen} out of range for {n_hidden} hidden layers")
    return chosen


def consistency_losses(
    base_hidden: Sequence[Tensor],
    adapt_hidden: Sequence[Tensor],
    base_steps: tuple[Tensor, Tensor],
    adapt_steps: tuple[Tensor, Tensor],
    layers: Optional[Sequence[int]] = None,
) -> tuple[float, float, float]:
    """(L_consistency, L_spatial, L_temporal) двух сетей на одинаковых входах.

    Args:
        base_hidden: Скрытые активации базовой сети по слоям
        adapt_hidden: Те же активации адаптированной сети
        base_steps: (Z_{t−1}, Z_{t−2}) базовой сети
        adapt_steps: (Z_{t−1}, Z_{t−2}) адаптированной сети
        layers: Сравниваемые скрытые слои (по умолчанию все)

    Returns:
        tuple: Σ_l mean||h_b − h_a||², mean||Z^a_{t−1} − Z^b_{t−1}||²,
        mean||ΔZ^a − ΔZ^b||² по приращениям между соседними шагами

    Raises:
        ShapeMismatchError: Разное число слоёв у сетей
    """
    if len(base_hidden) != len(adapt_hidden):
        raise ShapeMismatchError(
            f"activation pairing needs equal layer counts, got {len(base_hidden)} and {len(adapt_hidden)}"
        )
    consistency = 0.0
    for layer in _layers(len(base_hidden), layers):
        consistency += _mean_sq(base_hidden[layer] - adapt_hidden[layer])
    spatial = _mean_sq(adapt_steps[0] - base_steps[0])
    drift = (adapt_steps[1] - adapt_steps[0]) - (base_steps[1] - base_steps[0])
    return consistency, spatial, _mean_sq(drift)


@dataclass
class DualRollout:
    base: Rollout
    adapt: Rollout

    @property
    def base_steps(self) -> tuple[Tensor, Tensor]:
        return self.base.z_s, self.base.z_s2

    @property
    def adapt_steps(self) -> tuple[Tensor, Tensor]:
        return self.adapt.z_s, self.adapt.z_s2


def dual_rollout(network: LoraNetwork, batch: StageBatch, *, refine: bool = True) -> DualRollout:
    # кэши нужны обеим сетям: скрытые активации входят в L_consistency
    return DualRollout(
        base=rollout(network.base, batch, with_grad=True, refine=refine),
        adapt=rollout(network, batch, with_grad=True, refine=refine),
    )


def _stage2_terms(
    network: LoraNetwork,
    batch: StageBatch,
    weights: Stage2Weights,
    layers: Optional[Sequence[int]],
    with_grad: bool,
    refine: bool = True,
) -> tuple[float, dict[str, float], Optional[list[Tensor]]]:
    dual = dual_rollout(network, batch, refine=refine)
    target = batch.noise - batch.z0
    resid = dual.adapt.phi1 - target
    consistency, spatial, temporal = consistency_losses(
        dual.base.hidden, dual.adapt.hidden, dual.base_steps, dual.adapt_steps, layers
    )
    components = {
        "diff_adapt": _mean_sq(resid),
        "diff_base": _mean_sq(dual.base.phi1 - target),
        "spatial": spatial,
        "consistency": consistency,
        "temporal": temporal,
        "l2": 0.0,
        "ssim": 0.0,
    }
    recon_values, recon_grads = reconstruction_terms(
        dual.adapt.recon, batch, l2=weights.l2 > 0, ssim=weights.ssim > 0
    )
    components.update(recon_values)
    total = (
        weights.diff * components["diff_adapt"]
        + weights.spatial * spatial
        + weights.consistency * consistency
        + weights.temporal * temporal
        + weights.l2 * components["l2"]
        + weights.ssim * components["ssim"]
    )
    if not with_grad:
        return total, components, None

    n = batch.n
    hidden_grads = {
        layer: weights.consistency * 2.0 * (dual.adapt.hidden[layer] - dual.base.hidden[layer]) / n
        for layer in _layers(len(dual.base.hidden), layers)
    }
    drift = (dual.adapt.z_s2 - dual.adapt.z_s) - (dual.base.z_s2 - dual.base.z_s)
    g_zs = weights.spatial * 2.0 * (dual.adapt.z_s - dual.base.z_s) / n - weights.temporal * 2.0 * drift / n
    g_zs2 = weights.temporal * 2.0 * drift / n
    g_recon = np.zeros_like(dual.adapt.recon)
    for name, g in recon_grads.items():
        g_recon += getattr(weights, name) * g
    grads = rollout_backward(
        network,
        dual.adapt,
        batch.dt,
        g_phi1=weights.diff * 2.0 * resid / n,
        g_recon=g_recon,
        g_zs=g_zs,
        g_zs2=g_zs2,
        hidden_grads=hidden_grads,
    )
    return total, components, grads


def stage2_loss(
    network: LoraNetwork,
    batch: StageBatch,
    weights: Stage2Weights,
    layers: Optional[Sequence[int]] = None,
    *,
    refine: bool = True,
) -> tuple[float, dict[str, float]]:
    """Составная потеря этапа 2; L^base_diff только логируется."""
    total, components, _ = _stage2_terms(network, batch, weights, layers, with_grad=False, refine=refine)
    return total, components


def stage2_loss_and_grad(
    network: LoraNetwork,
    batch: StageBatch,
    weights: Stage2Weights,
    layers: Optional[Sequence[int]] = None,
    *,
    refine: bool = True,
) -> tuple[float, dict[str, float], list[Tensor]]:
    total, components, grads = _stage2_terms(network, batch, weights, layers, with_grad=True, refine=refine)
    assert grads is not None
    return total, components, grads


def stage2_train(
    base: VelocityNet,
    adapters: AdapterSet,
    images: Tensor,
    conds: Tensor,
    weights: Stage2Weights,
    cfg: TrainConfig,
    *,
    t_max: int,
    image_shape: tuple[int, int],
    layers: Optional[Sequence[int]] = None,
    refine: bool = True,
    label: str = "stage2",
) -> tuple[AdapterSet, LossTrace]:
    """Дообучение адаптеров при замороженной базовой сети.

    Returns:
        tuple: Обученная копия адаптеров и трасса потерь

    Raises:
        InvariantViolation: Параметры базовой сети изменились за время обучения
    """
    before = parameters_checksum(base.parameters())
    network = LoraNetwork(base, adapters.copy())
    last: dict[str, float] = {}

    def objective(step: int, rng: RngState) -> tuple[float, list[Tensor]]:
        # Z_{t−2} существует только при t ≥ 2δT
        batch = make_stage_batch(
            images,
            conds,
            rng,
            t_max=t_max,
            batch_size=cfg.batch_size,
            image_shape=image_shape,
            min_index=2,
        )
        total, components, grads = stage2_loss_and_grad(network, batch, weights, layers, refine=refine)
        last.clear()
        last.update(components)
        return total, grads

    logger.info(
        "stage2: rank=%d, trainable=%d of %d base parameters",
        network.adapters.rank,
        network.adapters.trainable_count,
        base.parameter_count,
    )
    trace = fit(
        network,
        objective,
        cfg,
        RngState(cfg.seed).derive("stage2", label),
        label=label,
        components=lambda: dict(last),
    )
    after = parameters_checksum(base.parameters())
    if after != before:
        raise InvariantViolation(f"base parameters changed during stage 2 ({before[:12]} -> {after[:12]})")
    return network.adapters, trace


async def generate_pair(
    base: VelocityNet,
    adapters: AdapterSet,
    cond: Tensor,
    image_shape: tuple[int, int],
    n_steps: int,
    rng: RngState,
) -> tuple[Tensor, Tensor]:
    """Генерации базовой и адаптированной сетей из одного шума, параллельно."""
    cond = np.atleast_2d(cond)
    noise = rng.generator().standard_normal((cond.shape[0], image_shape[0] * image_shape[1]))
    network = LoraNetwork(base, adapters)
    base_images, adapt_images = await asyncio.gather(
        asyncio.to_thread(generate, base, cond, image_shape, n_steps, noise),
        asyncio.to_thread(generate, network, cond, image_shape, n_steps, noise),
    )
    return base_images, adapt_images
