from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Literal, Mapping, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import convolve2d
from scipy.spatial.distance import cdist, pdist
from scipy.stats import gaussian_kde

from src.app.core.errors import ConfigError, NumericError, ShapeMismatchError
from src.app.core.rng import RngState
from src.app.models.distributions import DistributionSpec
from src.app.models.reports import MetricReport
from src.app.services import distributions
from src.app.services.nn import Tensor

logger = logging.getLogger(__name__)

BANDWIDTH_FACTORS = (0.5, 1.0, 2.0)
FID_FEATURES = 16
SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _samples(x: Tensor, what: str, minimum: int = 1) -> Tensor:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] < minimum:
        raise ConfigError(f"{what}: need at least {minimum} samples, got shape {np.shape(x)}")
    return arr


def _pair(x: Tensor, y: Tensor, minimum: int = 1) -> tuple[Tensor, Tensor]:
    xs, ys = _samples(x, "X", minimum), _samples(y, "Y", minimum)
    if xs.shape[1] != ys.shape[1]:
        raise ShapeMismatchError(f"sample dimensions differ: {xs.shape[1]} vs {ys.shape[1]}")
    return xs, ys


def median_bandwidths(x: Tensor, y: Tensor) -> tuple[float, ...]:
    """Медианная эвристика по объединённой выборке × (0.5, 1, 2)."""
    pooled = np.concatenate([x, y], axis=0)
    dists = pdist(pooled)
    positive = dists[dists > 0]
    median = float(np.median(positive)) if positive.size else 1.0
    return tuple(median * f for f in BANDWIDTH_FACTORS)


def _kernel(sq_dists: Tensor, bandwidths: Sequence[float]) -> Tensor:
    out = np.zeros_like(sq_dists)
    for h in bandwidths:
        out += np.exp(-sq_dists / (2.0 * h * h))
    return out


def _offdiag_sum(k: Tensor) -> float:
    return float(np.sum(k) - np.sum(np.diag(k)))


def mmd2(x: Tensor, y: Tensor, bandwidths: Optional[Sequence[float]] = None) -> float:
    """Несмещённая оценка MMD² с суммой RBF-ядер.

    При равных размерах выборок используется парная U-статистика
    (диагональ перекрёстного ядра тоже исключена), иначе стандартная
    несмещённая форма.
    """
    xs, ys = _pair(x, y, minimum=2)
    if bandwidths is None:
        bandwidths = median_bandwidths(xs, ys)
    if any(h <= 0 for h in bandwidths):
        raise ConfigError("kernel bandwidths must be positive")
    kxx = _kernel(cdist(xs, xs, "sqeuclidean"), bandwidths)
    kyy = _kernel(cdist(ys, ys, "sqeuclidean"), bandwidths)
    kxy = _kernel(cdist(xs, ys, "sqeuclidean"), bandwidths)
    n, m = xs.shape[0], ys.shape[0]
    if n == m:
        value = (_offdiag_sum(kxx) + _offdiag_sum(kyy) - 2.0 * _offdiag_sum(kxy)) / (n * (n - 1))
    else:
        value = _offdiag_sum(kxx) / (n * (n - 1)) + _offdiag_sum(kyy) / (m * (m - 1)) - 2.0 * float(np.mean(kxy))
    return float(value)


def sliced_wasserstein(x: Tensor, y: Tensor, n_projections: int, rng: RngState) -> float:
    """sqrt(d · среднее по направлениям W2²) по отсортированным проекциям."""
    xs, ys = _pair(x, y)
    if n_projections < 1:
        raise ConfigError("n_projections must be at least 1")
    dim = xs.shape[1]
    directions = rng.generator().standard_normal((n_projections, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    px = np.sort(xs @ directions.T, axis=0)
    py = np.sort(ys @ directions.T, axis=0)
    if px.shape[0] != py.shape[0]:
        levels = (np.arange(max(px.shape[0], py.shape[0])) + 0.5) / max(px.shape[0], py.shape[0])
        px = np.quantile(px, levels, axis=0)
        py = np.quantile(py, levels, axis=0)
    w2_sq = np.mean((px - py) ** 2, axis=0)
    return float(math.sqrt(dim * float(np.mean(w2_sq))))


@dataclass(frozen=True)
class RandomFeatures:
    weights: Tensor
    offsets: Tensor

    @classmethod
    def create(cls, dim: int, seed: int, n_features: int = FID_FEATURES) -> "RandomFeatures":
        gen = RngState(seed).derive("toy-fid", dim).generator()
        return cls(gen.standard_normal((n_features, dim)) / math.sqrt(dim), gen.standard_normal(n_features))

    def __call__(self, x: Tensor) -> Tensor:
        return np.maximum(x @ self.weights.T + self.offsets, 0.0)


def _psd_sqrt(c: Tensor) -> Tensor:
    vals, vecs = np.linalg.eigh((c + c.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu1: Tensor, c1: Tensor, mu2: Tensor, c2: Tensor) -> float:
    s1 = _psd_sqrt(c1)
    middle = np.linalg.eigvalsh((s1 @ c2 @ s1 + (s1 @ c2 @ s1).T) / 2.0)
    cross = float(np.sum(np.sqrt(np.clip(middle, 0.0, None))))
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(c1) + np.trace(c2) - 2.0 * cross)
    return max(value, 0.0)


def toy_fid(
    x: Tensor,
    y: Tensor,
    feature_seed: int = 0,
    *,
    feature_map: Literal["random", "identity"] = "random",
) -> float:
    """Расстояние Фреше в фиксированном 16-мерном пространстве случайных признаков."""
    xs, ys = _pair(x, y)
    if xs.shape[0] <= FID_FEATURES or ys.shape[0] <= FID_FEATURES:
        raise ConfigError(f"toy FID needs more than {FID_FEATURES} samples per set")
    if feature_map == "random":
        features = RandomFeatures.create(xs.shape[1], feature_seed)
        fx, fy = features(xs), features(ys)
    else:
        fx, fy = xs, ys
    c1, c2 = np.cov(fx, rowvar=False), np.cov(fy, rowvar=False)
    if not (np.all(np.isfinite(c1)) and np.all(np.isfinite(c2))):
        raise NumericError("feature covariance is not computable")
    return frechet_distance(fx.mean(axis=0), np.atleast_2d(c1), fy.mean(axis=0), np.atleast_2d(c2))


def _local_stats(a: Tensor, b: Tensor, window: int) -> tuple[Tensor, ...]:
    wa = sliding_window_view(a, (window, window), axis=(-2, -1))
    wb = sliding_window_view(b, (window, window), axis=(-2, -1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    return mu_a, mu_b, var_a, var_b, cov


def _check_images(a: Tensor, b: Tensor, window: int) -> tuple[Tensor, Tensor]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim < 2 or window > a.shape[-1] or window > a.shape[-2] or window < 1:
        raise ConfigError(f"window {window} does not fit images of shape {a.shape}")
    return a, b


def ssim_map(
    a: Tensor, b: Tensor, window: int = SSIM_WINDOW, c1: float = SSIM_C1, c2: float = SSIM_C2
) -> Tensor:
    a, b = _check_images(a, b, window)
    mu_a, mu_b, var_a, var_b, cov = _local_stats(a, b, window)
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a: Tensor, b: Tensor, window: int = SSIM_WINDOW, c1: float = SSIM_C1, c2: float = SSIM_C2) -> float:
    """Средний локальный SSIM с равномерным окном."""
    return float(np.mean(ssim_map(a, b, window, c1, c2)))


def ssim_and_grad(
    a: Tensor, b: Tensor, window: int = SSIM_WINDOW, c1: float = SSIM_C1, c2: float = SSIM_C2
) -> tuple[Tensor, Tensor]:
    """SSIM по изображениям батча (n, H, W) и градиент по ``a``."""
    a, b = _check_images(a, b, window)
    if a.ndim == 2:
        values, grad = ssim_and_grad(a[None], b[None], window, c1, c2)
        return values, grad[0]
    mu_a, mu_b, var_a, var_b, cov = _local_stats(a, b, window)
    a1 = 2.0 * mu_a * mu_b + c1
    a2 = 2.0 * cov + c2
    b1 = mu_a * mu_a + mu_b * mu_b + c1
    b2 = var_a + var_b + c2
    s = a1 * a2 / (b1 * b2)
    n_windows = s.shape[-1] * s.shape[-2]
    pixels = window * window

    d_mu = 2.0 * mu_b * a2 / (b1 * b2) - s * 2.0 * mu_a / b1
    d_cov = 2.0 * a1 / (b1 * b2)
    d_var = -s / b2
    alpha = d_mu - 2.0 * mu_a * d_var - mu_b * d_cov
    beta = 2.0 * d_var
    box = np.ones((window, window))
    grad = np.empty_like(a)
    for i in range(a.shape[0]):
        # сумма коэффициентов по всем окнам, содержащим пиксель
        sa = convolve2d(alpha[i], box, mode="full")
        sb = convolve2d(beta[i], box, mode="full")
        sc = convolve2d(d_cov[i], box, mode="full")
        grad[i] = (sa + a[i] * sb + b[i] * sc) / (pixels * n_windows)
    return s.mean(axis=(-2, -1)), grad


@dataclass
class AlignmentTable:
    rows: list[dict[str, float]] = field(default_factory=list)
    summary: dict[str, float] = field(default_factory=dict)

    def summary_rows(self) -> list[dict[str, float]]:
        return [{"sampler": name, "mmd2": value} for name, value in self.summary.items()]


SamplerFn = Callable[[int, RngState], Tensor]


def alignment_export(
    samplers: Mapping[str, SamplerFn],
    target: DistributionSpec,
    n: int,
    bins: int,
    rng: RngState,
) -> AlignmentTable:
    """Гистограммы и KDE одномерных маргиналов против цели плюс сводный MMD²."""
    if not samplers:
        raise ConfigError("at least one sampler is required")
    if bins < 2:
        raise ConfigError("bins must be at least 2")
    truth = distributions.sample(target, n, rng.derive("align", "target"))
    reference = distributions.sample(target, n, rng.derive("align", "reference"))
    drawn = {name: _samples(fn(n, rng.derive("align", name)), name) for name, fn in samplers.items()}
    table = AlignmentTable()
    for dim in range(truth.shape[1]):
        pooled = np.concatenate([truth[:, dim], *(s[:, dim] for s in drawn.values())])
        edges = np.linspace(pooled.min(), pooled.max(), bins + 1)
        centers = 0.5 * (edges[:-1] + edges[1:])
        columns = {"target": truth[:, dim], **{name: s[:, dim] for name, s in drawn.items()}}
        hists = {name: np.histogram(col, bins=edges, density=True)[0] for name, col in columns.items()}
        kdes = {name: _kde(col, centers) for name, col in columns.items()}
        for b in range(bins):
            row: dict[str, float] = {"dim": dim, "bin": b, "center": float(centers[b])}
            for name in columns:
                row[f"{name}_hist"] = float(hists[name][b])
                row[f"{name}_kde"] = float(kdes[name][b])
            table.rows.append(row)
    for name, s in drawn.items():
        table.summary[name] = mmd2(s, reference)
    return table


def _kde(values: Tensor, points: Tensor) -> Tensor:
    if np.ptp(values) == 0.0:
        return np.zeros_like(points)
    return gaussian_kde(values)(points)


def measure(
    metric: str,
    fn: Callable[..., float],
    x: Tensor,
    y: Tensor,
    *,
    seed: Optional[int] = None,
    label: Optional[str] = None,
    **parameters: object,
) -> MetricReport:
    started = time.perf_counter()
    value = fn(x, y, **parameters)
    seconds = time.perf_counter() - started
    recorded = {k: (v.seed if isinstance(v, RngState) else v) for k, v in parameters.items()}
    return MetricReport(
        metric=metric,
        value=value,
        n_x=int(np.shape(x)[0]),
        n_y=int(np.shape(y)[0]),
        parameters=recorded,
        seed=seed,
        seconds=seconds,
        label=label,
    )


def evaluate_samples(
    x: Tensor,
    y: Tensor,
    *,
    rng: RngState,
    n_projections: int = 256,
    feature_seed: int = 0,
    label: Optional[str] = None,
) -> list[MetricReport]:
    """MMD², sliced-W2 и (если выборки достаточно велики) toy-FID."""
    xs, ys = _pair(x, y, minimum=2)
    reports = [
        measure("mmd2", mmd2, xs, ys, bandwidths=median_bandwidths(xs, ys), seed=rng.seed, label=label),
        measure(
            "sliced_wasserstein",
            sliced_wasserstein,
            xs,
            ys,
            n_projections=n_projections,
            rng=rng.derive("sliced"),
            seed=rng.seed,
            label=label,
        ),
    ]
    if min(xs.shape[0], ys.shape[0]) > FID_FEATURES:
        reports.append(measure("toy_fid", toy_fid, xs, ys, feature_seed=feature_seed, seed=rng.seed, label=label))
    return reports


@dataclass(frozen=True)
class NoiseFloor:
    mmd2: float
    sliced_wasserstein: float
    toy_fid: float
    n: int
    repeats: int

    def as_dict(self) -> dict[str, float]:
        return {
            "mmd2": self.mmd2,
            "sliced_wasserstein": self.sliced_wasserstein,
            "toy_fid": self.toy_fid,
            "n": self.n,
            "repeats": self.repeats,
        }


def calibrate_noise_floor(
    target: DistributionSpec, n: int, rng: RngState, *, repeats: int = 5, n_projections: int = 256
) -> NoiseFloor:
    """Самое большое расстояние между независимыми выборками одной цели."""
    worst = {"mmd2": 0.0, "sliced_wasserstein": 0.0, "toy_fid": 0.0}
    for r in range(repeats):
        a = distributions.sample(target, n, rng.derive("floor", r, "a"))
        b = distributions.sample(target, n, rng.derive("floor", r, "b"))
        worst["mmd2"] = max(worst["mmd2"], abs(mmd2(a, b)))
        worst["sliced_wasserstein"] = max(
            worst["sliced_wasserstein"], sliced_wasserstein(a, b, n_projections, rng.derive("floor", r, "proj"))
        )
        worst["toy_fid"] = max(worst["toy_fid"], toy_fid(a, b))
    logger.info("noise floor over %d repeats: %s", repeats, worst)
    return NoiseFloor(n=n, repeats=repeats, **worst)
