from __future__ import annotations

import math
from datetime import datetime
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class MetricReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    metric: str
    value: float
    n_x: int = Field(..., ge=0)
    n_y: int = Field(..., ge=0)
    parameters: dict[str, Any] = Field(default_factory=dict, description="Ширины ядер, число проекций и т.п.")
    seed: Optional[int] = None
    seconds: float = Field(default=0.0, ge=0)
    label: Optional[str] = None

    @field_validator("value")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("metric value must be finite")
        return value


class NfeReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    sampler: str
    steps: int = Field(..., ge=1, description="Шагов на один сэмпл")
    samples: int = Field(..., ge=1)
    evaluations: int = Field(..., ge=1, description="Подсчитанные вызовы сети (построчно)")
    seconds: float = Field(..., ge=0)
    samples_per_second: float = Field(..., ge=0)

    @model_validator(mode="after")
    def _exact_accounting(self) -> "NfeReport":
        if self.evaluations != self.steps * self.samples:
            raise ValueError(
                f"evaluations {self.evaluations} != steps {self.steps} x samples {self.samples}"
            )
        return self


class RunManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    command: str
    config_hash: str
    code_version: str
    seed: int
    started_at: datetime
    finished_at: Optional[datetime] = None
    status: str = "running"
    exit_code: Optional[int] = None
    artifacts: list[str] = Field(default_factory=list)
    invariants: dict[str, bool] = Field(default_factory=dict)
    overrides: dict[str, Any] = Field(default_factory=dict)
    config: dict[str, Any] = Field(default_factory=dict)


class ExperimentResult(BaseModel):
    """Итог статистического эксперимента по зафиксированному списку сидов."""

    model_config = ConfigDict(extra="forbid")

    name: str
    seeds: list[int]
    values: dict[str, list[float]] = Field(default_factory=dict)
    passes: list[bool] = Field(default_factory=list)
    required: int = Field(..., ge=0)
    threshold: Optional[float] = None
    notes: str = ""

    @property
    def passed(self) -> int:
        return sum(self.passes)

    @property
    def ok(self) -> bool:
        return self.passed >= self.required
