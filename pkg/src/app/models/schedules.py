from __future__ import annotations

from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator


class _Schedule(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class RectifiedLinear(_Schedule):
    """1 − ᾱ_t = (1 − t)²: поправка исчезает на конце данных t = 1."""

    kind: Literal["rectified_linear"] = "rectified_linear"


class DdpmCosine(_Schedule):
    kind: Literal["ddpm_cosine"] = "ddpm_cosine"
    s: float = Field(default=0.008, gt=0, description="Сдвиг косинусного расписания")


class CustomSchedule(_Schedule):
    kind: Literal["custom"] = "custom"
    table: tuple[tuple[float, float], ...] = Field(..., min_length=2, description="Пары (t, ᾱ_t)")

    @model_validator(mode="after")
    def _check(self) -> "CustomSchedule":
        ts = [t for t, _ in self.table]
        values = [a for _, a in self.table]
        if ts[0] != 0.0 or ts[-1] != 1.0:
            raise ValueError("schedule table must cover t = 0 and t = 1")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("schedule times must be strictly increasing")
        if any(v < 0.0 or v > 1.0 for v in values):
            raise ValueError("alpha-bar values must lie in [0, 1]")
        if any(b < a for a, b in zip(values, values[1:])):
            raise ValueError("alpha-bar must be nondecreasing in t")
        if values[-1] != 1.0:
            raise ValueError("alpha-bar must equal 1 at t = 1")
        return self


Schedule = Annotated[
    Union[RectifiedLinear, DdpmCosine, CustomSchedule],
    Field(discriminator="kind"),
]


def identity_schedule() -> CustomSchedule:
    """ᾱ ≡ 1: поправка Твиди тождественно равна нулю."""
    return CustomSchedule(table=((0.0, 1.0), (1.0, 1.0)))
