from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import logsumexp, softmax

from src.app.core.errors import CapabilityError, ConfigError, ShapeMismatchError, SingularityError
from src.app.core.rng import RngState
from src.app.models.distributions import (
    Checkerboard,
    DistributionSpec,
    GaussianMixture,
    IsotropicGaussian,
    PointMass,
    Ring,
)
from src.app.services.nn import Tensor, TimeLike, as_batch, time_column

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MixtureParams:
    """Диагональная смесь; в отличие от GaussianMixture допускает нулевые дисперсии (точечные массы)."""

    weights: Tensor  # (K,)
    means: Tensor  # (K, d)
    variances: Tensor  # (K, d)

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    def to_spec(self) -> GaussianMixture:
        return GaussianMixture(
            weights=tuple(float(w) for w in self.weights),
            means=tuple(tuple(float(v) for v in m) for m in self.means),
            variances=tuple(tuple(float(v) for v in var) for var in self.variances),
        )


@dataclass(frozen=True)
class NoiseModel:
    """Гауссов приор N(0, τ²) и шум наблюдения N(0, σ²)."""

    prior_variance: float
    noise_variance: float

    def __post_init__(self) -> None:
        if self.prior_variance <= 0 or self.noise_variance <= 0:
            raise ConfigError("noise model variances must be strictly positive")

    @property
    def marginal_variance(self) -> float:
        return self.prior_variance + self.noise_variance

    def marginal_score(self, z: Tensor) -> Tensor:
        return -np.asarray(z, dtype=np.float64) / self.marginal_variance

    def posterior_mean(self, z: Tensor) -> Tensor:
        return np.asarray(z, dtype=np.float64) * self.prior_variance / self.marginal_variance


def sample(spec: DistributionSpec, n: int, rng: RngState) -> Tensor:
    if n < 1:
        raise ConfigError("sample count must be at least 1")
    gen = rng.generator()
    if isinstance(spec, PointMass):
        return np.tile(np.asarray(spec.location, dtype=np.float64), (n, 1))
    if isinstance(spec, IsotropicGaussian):
        mean = np.asarray(spec.mean, dtype=np.float64)
        return mean + math.sqrt(spec.variance) * gen.standard_normal((n, spec.dim))
    if isinstance(spec, GaussianMixture):
        params = as_mixture(spec)
        comps = gen.choice(len(spec.weights), size=n, p=params.weights)
        noise = gen.standard_normal((n, spec.dim))
        return params.means[comps] + np.sqrt(params.variances[comps]) * noise
    if isinstance(spec, Ring):
        if spec.radius <= 0:
            raise ConfigError("ring radius must be positive")
        theta = gen.uniform(0.0, 2.0 * math.pi, size=n)
        radius = spec.radius + spec.sigma * gen.standard_normal(n)
        return np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    if isinstance(spec, Checkerboard):
        if spec.cell_size <= 0:
            raise ConfigError("checkerboard cell size must be positive")
        cells = np.array(
            [(i, j) for i in range(spec.extent) for j in range(spec.extent) if (i + j) % 2 == 0],
            dtype=np.float64,
        )
        picks = cells[gen.integers(0, len(cells), size=n)]
        offsets = gen.uniform(0.0, 1.0, size=(n, 2))
        return (picks + offsets - spec.extent / 2.0) * spec.cell_size
    raise CapabilityError(f"no sampler for {type(spec).__name__}")


def as_mixture(spec: DistributionSpec) -> MixtureParams:
    if isinstance(spec, GaussianMixture):
        return MixtureParams(
            np.asarray(spec.weights, dtype=np.float64),
            np.asarray(spec.means, dtype=np.float64),
            np.asarray(spec.variances, dtype=np.float64),
        )
    if isinstance(spec, IsotropicGaussian):
        return MixtureParams(
            np.ones(1),
            np.asarray([spec.mean], dtype=np.float64),
            np.full((1, spec.dim), spec.variance),
        )
    if isinstance(spec, PointMass):
        return MixtureParams(np.ones(1), np.asarray([spec.location], dtype=np.float64), np.zeros((1, spec.dim)))
    raise CapabilityError(f"{type(spec).__name__} has no Gaussian-mixture form")


def _log_weights(weights: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        return np.log(weights)


def _component_log_pdf(means: Tensor, variances: Tensor, x: Tensor) -> Tensor:
    # means/variances: (n, K, d) или (K, d); x: (n, d)
    diff = x[:, None, :] - means
    return -0.5 * np.sum(LOG_2PI + np.log(variances) + diff * diff / variances, axis=-1)


def mixture_log_density(params: MixtureParams, x: Tensor) -> Tensor:
    if np.any(params.variances <= 0):
        raise SingularityError("mixture has a degenerate component")
    xb = as_batch(x, params.dim, "point")
    log_terms = _log_weights(params.weights)[None, :] + _component_log_pdf(params.means, params.variances, xb)
    return logsumexp(log_terms, axis=1)


def mixture_score(params: MixtureParams, x: Tensor) -> Tensor:
    if np.any(params.variances <= 0):
        raise SingularityError("score of a degenerate component is undefined")
    xb = as_batch(x, params.dim, "point")
    log_terms = _log_weights(params.weights)[None, :] + _component_log_pdf(params.means, params.variances, xb)
    resp = softmax(log_terms, axis=1)
    comp_scores = -(xb[:, None, :] - params.means) / params.variances
    return np.einsum("nk,nkd->nd", resp, comp_scores)


def log_density(spec: DistributionSpec, x: Tensor) -> Union[float, Tensor]:
    """Точная логарифмическая плотность; для одной точки возвращает float."""
    single = np.ndim(x) == 1
    if isinstance(spec, (IsotropicGaussian, GaussianMixture)):
        values = mixture_log_density(as_mixture(spec), x)
    elif isinstance(spec, Ring):
        if spec.radius <= 0 or spec.sigma <= 0:
            raise CapabilityError("ring density needs positive radius and sigma")
        xb = as_batch(x, 2, "point")
        r = np.linalg.norm(xb, axis=1)
        # радиус R + σξ может быть отрицательным: точка уходит на противоположную сторону
        log_folded = np.logaddexp(
            -0.5 * ((r - spec.radius) / spec.sigma) ** 2,
            -0.5 * ((r + spec.radius) / spec.sigma) ** 2,
        ) - 0.5 * LOG_2PI - math.log(spec.sigma)
        with np.errstate(divide="ignore"):
            values = log_folded - LOG_2PI - np.log(r)
    else:
        raise CapabilityError(f"log density is not available for {type(spec).__name__}")
    return float(values[0]) if single else values


def differential_entropy(spec: DistributionSpec) -> float:
    if not isinstance(spec, IsotropicGaussian):
        raise CapabilityError("closed-form entropy only for isotropic Gaussians")
    return 0.5 * spec.dim * (1.0 + LOG_2PI + math.log(spec.variance))


def _check_time(t: Tensor) -> None:
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ConfigError("time must lie in [0, 1]")


def interpolation_marginal(prior: DistributionSpec, target: DistributionSpec, t: float) -> MixtureParams:
    """Закон (1−t)x0 + t·x1: смесь Σ w_k N((1−t)m0 + tμ_k, (1−t)²v0 + t²V_k)."""
    if not isinstance(prior, IsotropicGaussian):
        raise CapabilityError("interpolation marginal needs an isotropic Gaussian prior")
    _check_time(np.asarray([t]))
    tgt = as_mixture(target)
    if tgt.dim != prior.dim:
        raise ShapeMismatchError("prior and target dimensions differ")
    m0 = np.asarray(prior.mean, dtype=np.float64)
    means = (1.0 - t) * m0[None, :] + t * tgt.means
    variances = (1.0 - t) ** 2 * prior.variance + t**2 * tgt.variances
    return MixtureParams(tgt.weights, means, variances)


def marginal_interp_score(prior: DistributionSpec, target: DistributionSpec, x: Tensor, t: TimeLike) -> Tensor:
    """Точный скор маргинала линейной интерполяции приора и гауссовой смеси."""
    if not isinstance(prior, IsotropicGaussian):
        raise CapabilityError("analytic interpolation score needs an isotropic Gaussian prior")
    tgt = as_mixture(target)
    single = np.ndim(x) == 1
    xb = as_batch(x, prior.dim, "point")
    if tgt.dim != prior.dim:
        raise ShapeMismatchError("prior and target dimensions differ")
    tt = time_column(t, xb.shape[0])
    _check_time(tt)
    s = tt[:, None, None]
    m0 = np.asarray(prior.mean, dtype=np.float64)
    means = (1.0 - s) * m0[None, None, :] + s * tgt.means[None, :, :]
    variances = (1.0 - s) ** 2 * prior.variance + s**2 * tgt.variances[None, :, :]
    if np.any(variances <= 0):
        raise SingularityError("interpolation marginal is degenerate at this time")
    log_terms = _log_weights(tgt.weights)[None, :] + _component_log_pdf(means, variances, xb)
    resp = softmax(log_terms, axis=1)
    comp_scores = -(xb[:, None, :] - means) / variances
    score = np.einsum("nk,nkd->nd", resp, comp_scores)
    return score[0] if single else score
