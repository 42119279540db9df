from __future__ import annotations

from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

WEIGHT_TOLERANCE = 1e-12


class _Spec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class IsotropicGaussian(_Spec):
    kind: Literal["gaussian"] = "gaussian"
    mean: tuple[float, ...] = Field(..., min_length=1)
    variance: float = Field(default=1.0, gt=0)

    @property
    def dim(self) -> int:
        return len(self.mean)


class GaussianMixture(_Spec):
    kind: Literal["mixture"] = "mixture"
    weights: tuple[float, ...] = Field(..., min_length=1)
    means: tuple[tuple[float, ...], ...]
    variances: tuple[tuple[float, ...], ...]

    @model_validator(mode="after")
    def _check(self) -> "GaussianMixture":
        k = len(self.weights)
        if len(self.means) != k or len(self.variances) != k:
            raise ValueError("weights, means and variances must have one entry per component")
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > WEIGHT_TOLERANCE:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        dims = {len(m) for m in self.means} | {len(v) for v in self.variances}
        if len(dims) != 1 or 0 in dims:
            raise ValueError("component means and variances must share one dimension")
        if any(v <= 0 for var in self.variances for v in var):
            raise ValueError("variances must be strictly positive")
        return self

    @property
    def dim(self) -> int:
        return len(self.means[0])


class Ring(_Spec):
    kind: Literal["ring"] = "ring"
    radius: float = 2.0
    sigma: float = Field(default=0.1, ge=0)

    @property
    def dim(self) -> int:
        return 2


class Checkerboard(_Spec):
    kind: Literal["checkerboard"] = "checkerboard"
    cell_size: float = 1.0
    extent: int = Field(default=4, ge=1, description="Число клеток по стороне")

    @property
    def dim(self) -> int:
        return 2


class PointMass(_Spec):
    kind: Literal["point"] = "point"
    location: tuple[float, ...] = Field(..., min_length=1)

    @property
    def dim(self) -> int:
        return len(self.location)


DistributionSpec = Annotated[
    Union[IsotropicGaussian, GaussianMixture, Ring, Checkerboard, PointMass],
    Field(discriminator="kind"),
]


def two_component_gmm(separation: float = 3.0, variance: float = 0.25) -> GaussianMixture:
    """Эталонная цель: две равновесные компоненты в (±separation, 0)."""
    return GaussianMixture(
        weights=(0.5, 0.5),
        means=((-separation, 0.0), (separation, 0.0)),
        variances=((variance, variance), (variance, variance)),
    )


def standard_normal(dim: int) -> IsotropicGaussian:
    return IsotropicGaussian(mean=(0.0,) * dim, variance=1.0)
