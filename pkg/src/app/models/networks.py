from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator


class NetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    state_dim: int = Field(..., ge=1, description="Размерность состояния d")
    cond_dim: int = Field(default=0, ge=0, description="Размерность условия c")
    hidden: tuple[int, ...] = (64, 64)
    n_freqs: int = Field(default=4, ge=0, description="Число синусоидальных пар K")
    activation: Literal["silu"] = "silu"

    @field_validator("hidden")
    @classmethod
    def _positive_widths(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if any(width < 1 for width in value):
            raise ValueError("hidden widths must be positive")
        return value

    @property
    def input_dim(self) -> int:
        return self.state_dim + 2 * self.n_freqs + self.cond_dim

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.state_dim]
        return [(rows, cols) for cols, rows in zip(dims[:-1], dims[1:])]

    @property
    def parameter_count(self) -> int:
        return sum(rows * cols + rows for rows, cols in self.layer_shapes)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(default=2000, ge=0)
    batch_size: int = Field(default=256, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    seed: int = 0
    time_sampling: Literal["uniform"] = "uniform"
    weight_decay: float = Field(default=0.0, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    lr_schedule: Literal["constant", "cosine"] = "constant"
    grad_clip: Optional[float] = Field(default=None, gt=0)
    grad_accumulation: int = Field(default=1, ge=1)
    log_every: int = Field(default=500, ge=1)
