from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from src.app.core.errors import ConfigError, NumericError, ShapeMismatchError
from src.app.core.rng import RngState
from src.app.models.experiments import Stage1Weights
from src.app.models.networks import TrainConfig
from src.app.models.schedules import RectifiedLinear
from src.app.services.ewc import EwcState, ewc_penalty, ewc_penalty_grad
from src.app.services.metrics import SSIM_WINDOW, ssim_and_grad
from src.app.services.nn import ForwardCache, Tensor, TimeLike, Trainable, VelocityField
from src.app.services.training import LossTrace, fit
from src.app.services.tweedie import correction_coefficient, tweedie_posterior_mean

logger = logging.getLogger(__name__)

GRID_TOLERANCE = 1e-9
REFINEMENT_SCHEDULE = RectifiedLinear()


@dataclass
class StageBatch:
    """Батч этапа 1: данные Z0, условия Zs ⊕ Zp, шум и момент t на сетке k/T_max."""

    z0: Tensor
    zs: Tensor
    zp: Tensor
    noise: Tensor
    t: Tensor
    dt: float
    image_shape: tuple[int, int]

    def __post_init__(self) -> None:
        n = self.z0.shape[0]
        if self.noise.shape != self.z0.shape:
            raise ShapeMismatchError("noise must match the latents")
        if self.zs.shape[0] != n or self.zp.shape[0] != n or self.t.shape != (n,):
            raise ShapeMismatchError("conditions and times need one row per sample")
        if self.z0.shape[1] != self.image_shape[0] * self.image_shape[1]:
            raise ShapeMismatchError(f"latents of width {self.z0.shape[1]} are not {self.image_shape} images")
        if not (np.all(np.isfinite(self.zs)) and np.all(np.isfinite(self.zp))):
            raise NumericError("conditions must be finite")
        if self.dt <= 0 or self.dt > 1:
            raise ConfigError("step size must lie in (0, 1]")
        k = self.t / self.dt
        if np.any(np.abs(k - np.round(k)) > GRID_TOLERANCE) or np.any(self.t <= 0) or np.any(self.t > 1):
            raise ConfigError("times must lie on the grid {dt, 2dt, ..., 1}")

    @property
    def n(self) -> int:
        return int(self.z0.shape[0])

    @property
    def cond(self) -> Tensor:
        return np.concatenate([self.zs, self.zp], axis=1)

    @property
    def t_max(self) -> int:
        return int(round(1.0 / self.dt))

    @property
    def zt(self) -> Tensor:
        return stage1_forward_noise(self.z0, self.t, self.noise)

    def images(self, flat: Tensor) -> Tensor:
        return flat.reshape(-1, *self.image_shape)


def split_condition(cond: Tensor, n_mask: int = 64) -> tuple[Tensor, Tensor]:
    cond = np.atleast_2d(cond)
    return cond[:, :n_mask], cond[:, n_mask:]


def make_stage_batch(
    images: Tensor,
    conds: Tensor,
    rng: RngState,
    *,
    t_max: int,
    batch_size: int,
    image_shape: tuple[int, int],
    min_index: int = 1,
) -> StageBatch:
    """Случайный батч: строки набора, шум ε ~ N(0, I) и индекс k ∈ [min_index, T_max]."""
    if not 1 <= min_index <= t_max:
        raise ConfigError("min_index must lie in [1, t_max]")
    gen = rng.generator()
    rows = gen.integers(0, images.shape[0], size=batch_size)
    z0 = images[rows]
    noise = gen.standard_normal(z0.shape)
    k = gen.integers(min_index, t_max + 1, size=batch_size)
    zs, zp = split_condition(conds[rows])
    return StageBatch(z0, zs, zp, noise, k / t_max, 1.0 / t_max, image_shape)


def stage1_forward_noise(z0: Tensor, t: TimeLike, eps: Tensor) -> Tensor:
    """P(Z_t | Z_0) = (1 − t)·Z_0 + t·ε (данные в t = 0)."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ShapeMismatchError(f"data {z0.shape} and noise {eps.shape} differ")
    tt = np.asarray(t, dtype=np.float64)
    if np.any(tt < 0.0) or np.any(tt > 1.0):
        raise ConfigError("time must lie in [0, 1]")
    if tt.ndim == 1 and z0.ndim == 2:
        tt = tt[:, None]
    return (1.0 - tt) * z0 + tt * eps


@dataclass(frozen=True)
class ReverseDrift:
    """Обратный дрейф −φ_θ: сеть предсказывает направление ε − Z0."""

    net: VelocityField

    def __call__(self, z: Tensor, t: TimeLike, cond: Optional[Tensor] = None) -> Tensor:
        return -self.net(z, t, cond)


def stage1_reverse_step(
    field: VelocityField, z_t: Tensor, zs: Tensor, zp: Tensor, t: TimeLike, dt: float
) -> Tensor:
    """Z_{t−1} = Z_t + δT·field(Z_t, Zs ⊕ Zp, t)."""
    cond = np.concatenate([np.atleast_2d(zs), np.atleast_2d(zp)], axis=1)
    out = z_t + dt * field(z_t, t, cond)
    if not np.all(np.isfinite(out)):
        raise NumericError("reverse step produced a non-finite state")
    return out


def reverse_chain(
    net: VelocityField, noise: Tensor, cond: Tensor, n_steps: int
) -> Tensor:
    """Генерация: n_steps обратных шагов от чистого шума (t = 1) к данным (t = 0)."""
    if n_steps < 1:
        raise ConfigError("n_steps must be at least 1")
    zs, zp = split_condition(cond)
    drift = ReverseDrift(net)
    z = np.array(noise, dtype=np.float64)
    dt = 1.0 / n_steps
    for k in range(n_steps, 0, -1):
        z = stage1_reverse_step(drift, z, zs, zp, k / n_steps, dt)
    return z


def stage1_diff_loss(net: VelocityField, batch: StageBatch) -> float:
    """Среднее по строкам ||φ(Z_t, Zs, Zp, t) − (ε − Z0)||²."""
    resid = net(batch.zt, batch.t, batch.cond) - (batch.noise - batch.z0)
    return float(np.mean(np.sum(resid * resid, axis=1)))


def _evaluate(
    net: VelocityField, x: Tensor, t: Tensor, cond: Tensor, with_grad: bool
) -> tuple[Tensor, Optional[ForwardCache]]:
    if with_grad:
        return net.forward_cached(x, t, cond)  # type: ignore[attr-defined]
    return net(x, t, cond), None


@dataclass
class Rollout:
    """Два обратных шага из Z_t и уточнённая по Твиди реконструкция Z0."""

    phi1: Tensor
    cache1: Optional[ForwardCache]
    z_s: Tensor
    s: Tensor
    phi2: Tensor
    cache2: Optional[ForwardCache]
    z_s2: Tensor
    recon: Tensor
    refined: bool = True

    @property
    def hidden(self) -> list[Tensor]:
        return [] if self.cache1 is None else self.cache1.hidden


def tweedie_refine(z_s: Tensor, s: Tensor, phi: Tensor) -> Tensor:
    """E[Z0 | Z_s] через формулу Твиди со скором −(Z_s + (1 − s)φ)/s; строки с s = 0 не меняются."""
    recon = np.array(z_s, dtype=np.float64)
    active = s > 0.0
    if np.any(active):
        sa = s[active][:, None]
        score = -(z_s[active] + (1.0 - sa) * phi[active]) / sa
        coeff = correction_coefficient(REFINEMENT_SCHEDULE, 1.0 - s[active])
        recon[active] = tweedie_posterior_mean(z_s[active], coeff, score) / (1.0 - sa)
    return recon


def rollout(
    net: VelocityField, batch: StageBatch, *, with_grad: bool = False, refine: bool = True
) -> Rollout:
    """Два шага из Z_t; без ``refine`` реконструкцией служит сам Z_{t−1}."""
    cond = batch.cond
    phi1, cache1 = _evaluate(net, batch.zt, batch.t, cond, with_grad)
    z_s = batch.zt - batch.dt * phi1
    s = np.clip(batch.t - batch.dt, 0.0, 1.0)
    phi2, cache2 = _evaluate(net, z_s, s, cond, with_grad)
    z_s2 = z_s - batch.dt * phi2
    recon = tweedie_refine(z_s, s, phi2) if refine else z_s.copy()
    if not np.all(np.isfinite(recon)):
        raise NumericError("reconstruction is not finite")
    return Rollout(phi1, cache1, z_s, s, phi2, cache2, z_s2, recon, refine)


def rollout_backward(
    net: Trainable,
    roll: Rollout,
    dt: float,
    *,
    g_phi1: Tensor,
    g_recon: Optional[Tensor] = None,
    g_zs: Optional[Tensor] = None,
    g_zs2: Optional[Tensor] = None,
    hidden_grads: Optional[Mapping[int, Tensor]] = None,
) -> list[Tensor]:
    """Градиенты по параметрам через оба шага; реконструкция равна Z_s − s·φ(Z_s, s)."""
    g_s = np.zeros_like(roll.z_s) if g_zs is None else np.array(g_zs)
    g_phi2 = np.zeros_like(roll.phi2)
    if g_zs2 is not None:
        g_phi2 -= dt * g_zs2
        g_s += g_zs2
    if g_recon is not None:
        if roll.refined:
            g_phi2 -= roll.s[:, None] * g_recon
        g_s += g_recon
    grads2, g_x2 = net.backward(roll.cache2, g_phi2)
    g_s += g_x2
    grads1, _ = net.backward(roll.cache1, g_phi1 - dt * g_s, hidden_grads)
    return [a + b for a, b in zip(grads1, grads2)]


def reconstruction_terms(
    recon: Tensor, batch: StageBatch, *, l2: bool, ssim: bool, window: int = SSIM_WINDOW
) -> tuple[dict[str, float], Tensor]:
    """L2 = среднее ||Ẑ0 − Z0||², SSIM-член = среднее (1 − SSIM); градиенты по Ẑ0 без весов."""
    n = batch.n
    values: dict[str, float] = {}
    grads: dict[str, Tensor] = {}
    if l2:
        diff = recon - batch.z0
        values["l2"] = float(np.mean(np.sum(diff * diff, axis=1)))
        grads["l2"] = 2.0 * diff / n
    if ssim:
        win = min(window, *batch.image_shape)
        scores, g_img = ssim_and_grad(batch.images(recon), batch.images(batch.z0), win)
        values["ssim"] = float(np.mean(1.0 - scores))
        grads["ssim"] = -g_img.reshape(n, -1) / n
    return values, grads


def _stage1_terms(
    net: VelocityField,
    batch: StageBatch,
    weights: Stage1Weights,
    ewc: Optional[EwcState],
    with_grad: bool,
    refine: bool = True,
) -> tuple[float, dict[str, float], Optional[list[Tensor]]]:
    roll = rollout(net, batch, with_grad=with_grad, refine=refine)
    target = batch.noise - batch.z0
    resid = roll.phi1 - target
    components = {"diff": float(np.mean(np.sum(resid * resid, axis=1))), "l2": 0.0, "ssim": 0.0, "ewc": 0.0}
    recon_values, recon_grads = reconstruction_terms(
        roll.recon, batch, l2=weights.l2 > 0, ssim=weights.ssim > 0
    )
    components.update(recon_values)
    if ewc is not None and weights.ewc > 0:
        components["ewc"] = ewc_penalty(net, ewc)  # type: ignore[arg-type]

    total = weights.diff * components["diff"]
    for name in ("l2", "ssim", "ewc"):
        weight = getattr(weights, name)
        if weight > 0:
            total += weight * components[name]
    if not with_grad:
        return total, components, None

    g_recon = np.zeros_like(roll.recon)
    for name, g in recon_grads.items():
        g_recon += getattr(weights, name) * g
    grads = rollout_backward(
        net,  # type: ignore[arg-type]
        roll,
        batch.dt,
        g_phi1=weights.diff * 2.0 * resid / batch.n,
        g_recon=g_recon,
    )
    if ewc is not None and weights.ewc > 0:
        grads = [g + weights.ewc * e for g, e in zip(grads, ewc_penalty_grad(net, ewc))]  # type: ignore[arg-type]
    return total, components, grads


def composite_stage1_loss(
    net: VelocityField,
    batch: StageBatch,
    weights: Stage1Weights,
    ewc: Optional[EwcState] = None,
    *,
    refine: bool = True,
) -> tuple[float, dict[str, float]]:
    """L_diff + λ₂·L2 + λ_s·(1 − SSIM) + λ_e·EWC по реконструкции с уточнением Твиди."""
    total, components, _ = _stage1_terms(net, batch, weights, ewc, with_grad=False, refine=refine)
    return total, components


def composite_stage1_loss_and_grad(
    net: Trainable,
    batch: StageBatch,
    weights: Stage1Weights,
    ewc: Optional[EwcState] = None,
    *,
    refine: bool = True,
) -> tuple[float, dict[str, float], list[Tensor]]:
    total, components, grads = _stage1_terms(net, batch, weights, ewc, with_grad=True, refine=refine)
    assert grads is not None
    return total, components, grads


def diff_loss_and_grad(net: Trainable, batch: StageBatch) -> tuple[float, list[Tensor]]:
    """Только L_diff; якорная потеря для оценки Фишера."""
    pred, cache = net.forward_cached(batch.zt, batch.t, batch.cond)
    resid = pred - (batch.noise - batch.z0)
    grads, _ = net.backward(cache, 2.0 * resid / batch.n)
    return float(np.mean(np.sum(resid * resid, axis=1))), grads


def stage1_train(
    net: Trainable,
    images: Tensor,
    conds: Tensor,
    cfg: TrainConfig,
    weights: Stage1Weights,
    *,
    t_max: int,
    image_shape: tuple[int, int],
    ewc: Optional[EwcState] = None,
    refine: bool = True,
    label: str = "stage1",
) -> LossTrace:
    """Обучение этапа 1 составной потерей; слои FROZEN из ``ewc`` не обновляются."""
    last: dict[str, float] = {}

    def objective(step: int, rng: RngState) -> tuple[float, list[Tensor]]:
        batch = make_stage_batch(
            images, conds, rng, t_max=t_max, batch_size=cfg.batch_size, image_shape=image_shape
        )
        total, components, grads = composite_stage1_loss_and_grad(net, batch, weights, ewc, refine=refine)
        last.clear()
        last.update(components)
        return total, grads

    frozen = ewc.frozen_mask() if ewc is not None else None
    return fit(
        net,
        objective,
        cfg,
        RngState(cfg.seed).derive("stage1", label),
        label=label,
        frozen=frozen,
        components=lambda: dict(last),
    )


def anchor_batches(
    images: Tensor,
    conds: Tensor,
    rng: RngState,
    *,
    n_batches: int,
    t_max: int,
    batch_size: int,
    image_shape: tuple[int, int],
) -> list[StageBatch]:
    return [
        make_stage_batch(
            images, conds, rng.derive("anchor", i), t_max=t_max, batch_size=batch_size, image_shape=image_shape
        )
        for i in range(n_batches)
    ]


def anchor_loss(net: VelocityField, batches: Sequence[StageBatch]) -> float:
    return float(np.mean([stage1_diff_loss(net, b) for b in batches]))


def generate(
    net: VelocityField,
    cond: Tensor,
    image_shape: tuple[int, int],
    n_steps: int,
    rng: Union[RngState, Tensor],
) -> Tensor:
    """Изображения (n, H, W) из шума обратной цепочкой под условием."""
    cond = np.atleast_2d(cond)
    if isinstance(rng, RngState):
        noise = rng.generator().standard_normal((cond.shape[0], image_shape[0] * image_shape[1]))
    else:
        noise = np.asarray(rng, dtype=np.float64)
    return reverse_chain(net, noise, cond, n_steps).reshape(-1, *image_shape)
