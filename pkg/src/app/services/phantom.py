from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from src.app.core.errors import ConfigError
from src.app.core.rng import RngState
from src.app.services.nn import Tensor

logger = logging.getLogger(__name__)


class Severity(IntEnum):
    NONE = 0
    LOW = 1
    MILD = 2
    SEVERE = 3


# Константы генератора (доли min(H, W) и дисперсии спекла по степеням)
AMPLITUDE_FRACTIONS = (0.0, 0.05, 0.10, 0.18)
SPECKLE_VARIANCES = (0.001, 0.004, 0.008, 0.015)
ORGAN_LEVEL = 0.6
BACKGROUND_LEVEL = 0.2
BACKGROUND_VARIANCE = 0.001
POOLED_SIDE = 8
CONDITION_DIM = POOLED_SIDE * POOLED_SIDE + len(Severity)
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class PhantomSample:
    image: Tensor  # (H, W) в [0, 1]
    mask: np.ndarray  # (H, W) uint8, {0, 1}
    severity: Severity
    seed: int
    split: Optional[str] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    @property
    def amplitude(self) -> float:
        return AMPLITUDE_FRACTIONS[self.severity] * min(self.shape)


def _organ_mask(size: int, severity: Severity, rng: RngState) -> np.ndarray:
    gen = rng.generator()
    centre = (size - 1) / 2.0 + gen.uniform(-0.05, 0.05, size=2) * size
    semi = gen.uniform(0.25, 0.35, size=2) * size
    angle = gen.uniform(0.0, math.pi)
    lobes = int(gen.integers(5, 10))
    phase = gen.uniform(0.0, 2.0 * math.pi)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - centre[0], xx - centre[1]
    u = dx * math.cos(angle) + dy * math.sin(angle)
    v = -dx * math.sin(angle) + dy * math.cos(angle)
    rho = np.hypot(u / semi[0], v / semi[1])
    phi = np.arctan2(v / semi[1], u / semi[0])
    amplitude = AMPLITUDE_FRACTIONS[severity] * size
    boundary = 1.0 + amplitude / semi.mean() * np.sin(lobes * phi + phase)
    inside = rho <= boundary

    labels, count = ndimage.label(inside)
    if count > 1:
        sizes = ndimage.sum(inside, labels, index=range(1, count + 1))
        inside = labels == (int(np.argmax(sizes)) + 1)
    return inside.astype(np.uint8)


def gen_phantom(seed: int, severity: Severity | int, size: int = 32) -> PhantomSample:
    """Детерминированный фантом: эллипс с синусоидальной границей и спеклом.

    Геометрия зависит только от ``seed``; степень тяжести меняет амплитуду
    возмущения границы и дисперсию текстуры внутри органа.
    """
    severity = Severity(int(severity))
    if size < POOLED_SIDE:
        raise ConfigError(f"phantom size must be at least {POOLED_SIDE}")
    root = RngState(int(seed)).derive("phantom")
    mask = _organ_mask(size, severity, root.derive("shape"))
    gen = root.derive("texture", int(severity)).generator()
    organ = ORGAN_LEVEL + math.sqrt(SPECKLE_VARIANCES[severity]) * gen.standard_normal((size, size))
    background = BACKGROUND_LEVEL + math.sqrt(BACKGROUND_VARIANCE) * gen.standard_normal((size, size))
    image = np.clip(np.where(mask == 1, organ, background), 0.0, 1.0)
    return PhantomSample(image=image, mask=mask, severity=severity, seed=int(seed))


def _split_order(n: int, seed: int) -> list[int]:
    def digest(i: int) -> str:
        return hashlib.sha256(f"{seed}:{i}".encode("utf-8")).hexdigest()

    return sorted(range(n), key=digest)


def build_dataset(
    n: int, severity_mix: Sequence[float], seed: int, *, size: int = 32
) -> list[PhantomSample]:
    """Набор фантомов с детерминированным разбиением 80/10/10 по хэшу индекса."""
    if n < 10:
        raise ConfigError("a dataset needs at least 10 samples")
    mix = np.asarray(severity_mix, dtype=np.float64)
    if mix.shape != (len(Severity),) or np.any(mix < 0) or abs(float(mix.sum()) - 1.0) > 1e-9:
        raise ConfigError("severity mix must have 4 nonnegative weights summing to 1")
    root = RngState(int(seed)).derive("dataset")
    severities = root.derive("severity").generator().choice(len(Severity), size=n, p=mix / mix.sum())
    order = _split_order(n, seed)
    n_train, n_val = n * 8 // 10, n // 10
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[idx] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")

    samples = []
    for i in range(n):
        sample_seed = root.derive("sample", i).key % (2**63)
        sample = gen_phantom(sample_seed, Severity(int(severities[i])), size)
        samples.append(replace(sample, split=split_of[i]))
    logger.info("built %d phantoms (seed=%d, size=%d)", n, seed, size)
    return samples


def select_split(samples: Sequence[PhantomSample], split: str) -> list[PhantomSample]:
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    return [s for s in samples if s.split == split]


def pool_mask(mask: np.ndarray) -> Tensor:
    h, w = mask.shape
    if h % POOLED_SIDE or w % POOLED_SIDE:
        raise ConfigError(f"mask sides must be multiples of {POOLED_SIDE}")
    blocks = mask.astype(np.float64).reshape(POOLED_SIDE, h // POOLED_SIDE, POOLED_SIDE, w // POOLED_SIDE)
    return blocks.mean(axis=(1, 3)).reshape(-1)


def severity_one_hot(severity: Severity | int) -> Tensor:
    out = np.zeros(len(Severity))
    out[int(severity)] = 1.0
    return out


def encode_condition(sample: PhantomSample) -> Tensor:
    """8×8 усреднённая маска (64 значения) и one-hot степени тяжести (4 значения)."""
    return np.concatenate([pool_mask(sample.mask), severity_one_hot(sample.severity)])


def with_severity(condition: Tensor, severity: Severity | int) -> Tensor:
    cond = np.array(condition, dtype=np.float64)
    cond[..., POOLED_SIDE * POOLED_SIDE :] = severity_one_hot(severity)
    return cond


def stack(samples: Sequence[PhantomSample]) -> tuple[Tensor, Tensor]:
    """Плоские изображения (n, H·W) и условия (n, 68)."""
    if not samples:
        raise ConfigError("no phantom samples to stack")
    images = np.stack([s.image.reshape(-1) for s in samples])
    conds = np.stack([encode_condition(s) for s in samples])
    return images, conds


def organ_variance(image: Tensor, mask: np.ndarray) -> float:
    return float(np.var(np.asarray(image)[mask == 1]))


def mask_iou(image: Tensor, mask: np.ndarray, threshold: float = (ORGAN_LEVEL + BACKGROUND_LEVEL) / 2) -> float:
    predicted = np.asarray(image) > threshold
    truth = mask == 1
    union = np.logical_or(predicted, truth).sum()
    return float(np.logical_and(predicted, truth).sum() / union) if union else 1.0
