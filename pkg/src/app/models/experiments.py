from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.app.models.distributions import DistributionSpec, standard_normal, two_component_gmm
from src.app.models.networks import NetConfig, TrainConfig
from src.app.models.schedules import RectifiedLinear, Schedule

LossCombo = Literal["diff", "spatial", "consistency", "all"]
SEVERITIES = ("none", "low", "mild", "severe")


class _Config(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Stage1Weights(_Config):
    diff: float = Field(default=1.0, ge=0)
    l2: float = Field(default=0.1, ge=0, description="λ₂ при L2 реконструкции")
    ssim: float = Field(default=0.1, ge=0, description="λ_s при (1 − SSIM)")
    ewc: float = Field(default=1.0, ge=0, description="λ_e при штрафе EWC")


class Stage2Weights(_Config):
    diff: float = Field(default=1.0, ge=0)
    spatial: float = Field(default=1.0, ge=0)
    consistency: float = Field(default=0.1, ge=0)
    temporal: float = Field(default=1.0, ge=0)
    l2: float = Field(default=0.0, ge=0)
    ssim: float = Field(default=0.0, ge=0)

    @classmethod
    def for_combo(cls, combo: LossCombo, *, refine: bool = False) -> "Stage2Weights":
        """Комбинации потерь для абляции: только L_diff, +spatial, +consistency, все.

        Args:
            combo: Набор включённых членов
            refine: Добавить L2 и SSIM по реконструкции, уточнённой формулой Твиди,
                с весами этапа 1 по умолчанию
        """
        recon = {"l2": Stage1Weights().l2, "ssim": Stage1Weights().ssim} if refine else {}
        if combo == "diff":
            return cls(spatial=0.0, consistency=0.0, temporal=0.0, **recon)
        if combo == "spatial":
            return cls(consistency=0.0, temporal=0.0, **recon)
        if combo == "consistency":
            return cls(spatial=0.0, temporal=0.0, **recon)
        return cls(**recon)


class ScoreConfig(_Config):
    kind: Literal["analytic", "learned"] = "analytic"
    hidden: tuple[int, ...] = (64, 64)
    train: TrainConfig = TrainConfig(steps=2000)
    checkpoint: Optional[Path] = None


class PhantomConfig(_Config):
    n: int = Field(default=200, ge=10)
    size: int = Field(default=32, ge=8, description="Сторона изображения H = W")
    severity_mix: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    dataset: Optional[Path] = Field(default=None, description="Каталог, экспортированный gen-phantoms")

    @field_validator("size")
    @classmethod
    def _poolable(cls, value: int) -> int:
        if value % 8:
            raise ValueError("image size must be a multiple of 8 for mask pooling")
        return value

    @field_validator("severity_mix")
    @classmethod
    def _simplex(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if any(w < 0 for w in value) or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError("severity mix must be nonnegative and sum to 1")
        return value


class EwcConfig(_Config):
    strength: float = Field(default=100.0, ge=0, description="λ")
    n_batches: int = Field(default=8, ge=1)
    pretrain_steps: int = Field(default=0, ge=0, description="Шаги на якорной задаче до оценки Фишера")
    anchor_mix: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    frozen_layers: tuple[int, ...] = ()


class TrainFlowConfig(_Config):
    seed: int = 0
    prior: DistributionSpec = standard_normal(2)
    target: DistributionSpec = two_component_gmm()
    hidden: tuple[int, ...] = (64, 64)
    n_freqs: int = Field(default=4, ge=0)
    train: TrainConfig = TrainConfig(steps=5000)
    objective: Literal["plain", "corrected"] = "plain"
    schedule: Schedule = RectifiedLinear()
    score: ScoreConfig = ScoreConfig()
    reflow_rounds: int = Field(default=0, ge=0)
    reflow_pairs: int = Field(default=4096, ge=1)
    sampler_steps: int = Field(default=50, ge=1)
    straightness_pairs: int = Field(default=1024, ge=1)
    grid_size: int = Field(default=16, ge=2)

    @model_validator(mode="after")
    def _dims(self) -> "TrainFlowConfig":
        if self.prior.dim != self.target.dim:
            raise ValueError("prior and target dimensions differ")
        return self

    def net_config(self) -> NetConfig:
        return NetConfig(state_dim=self.prior.dim, hidden=self.hidden, n_freqs=self.n_freqs)


class SampleConfig(_Config):
    seed: int = 0
    checkpoint: Path = Path("checkpoint.bin")
    prior: DistributionSpec = standard_normal(2)
    target: DistributionSpec = two_component_gmm()
    n: int = Field(default=2048, ge=1)
    steps: int = Field(default=50, ge=1)
    corrected: bool = False
    schedule: Schedule = RectifiedLinear()
    score: ScoreConfig = ScoreConfig()
    compare_steps: Optional[int] = Field(default=None, ge=1, description="Второй прогон для отношения времени")
    chunks: int = Field(default=1, ge=1, description="Кусков батча для параллельной выборки")
    adapters: Optional[Path] = Field(default=None, description="adapters.lora этапа 2 над чекпоинтом checkpoint")
    phantoms: PhantomConfig = PhantomConfig()

    @model_validator(mode="after")
    def _adapters_are_uncorrected(self) -> "SampleConfig":
        if self.adapters is not None and self.corrected:
            raise ValueError("corrected sampling is not defined for adapted phantom networks")
        return self


class DistillConfig(_Config):
    seed: int = 0
    teacher: Path = Path("checkpoint.bin")
    prior: DistributionSpec = standard_normal(2)
    target: DistributionSpec = two_component_gmm()
    train: TrainConfig = TrainConfig(steps=2000)
    teacher_steps: int = Field(default=50, ge=1)
    n_pairs: int = Field(default=4096, ge=1)
    tweedie: bool = False
    schedule: Schedule = RectifiedLinear()
    score: ScoreConfig = ScoreConfig()
    eval_steps: tuple[int, ...] = (1, 2, 4)
    eval_samples: int = Field(default=2048, ge=2)


class Stage1Config(_Config):
    seed: int = 0
    phantoms: PhantomConfig = PhantomConfig()
    hidden: tuple[int, ...] = (128, 128)
    n_freqs: int = Field(default=4, ge=0)
    train: TrainConfig = TrainConfig(steps=2000, batch_size=32)
    t_max: int = Field(default=100, ge=2, description="T_max (число шагов диффузии)")
    weights: Stage1Weights = Stage1Weights()
    ewc: EwcConfig = EwcConfig()


class Stage2Config(_Config):
    seed: int = 0
    base: Path = Path("checkpoint.bin")
    phantoms: PhantomConfig = PhantomConfig()
    rank: int = Field(default=8, ge=1)
    alpha: Optional[float] = Field(default=None, gt=0)
    adapted_layers: Optional[tuple[int, ...]] = None
    consistency_layers: Optional[tuple[int, ...]] = None
    train: TrainConfig = TrainConfig(steps=2000, batch_size=32)
    t_max: int = Field(default=100, ge=2)
    weights: Stage2Weights = Stage2Weights()
    sample_steps: int = Field(default=20, ge=1)


class EvalConfig(_Config):
    seed: int = 0
    samples: Path
    reference: Optional[Path] = None
    target: Optional[DistributionSpec] = None
    n_reference: int = Field(default=2048, ge=2)
    n_projections: int = Field(default=256, ge=1)
    feature_seed: int = 0
    bins: int = Field(default=32, ge=2)

    @model_validator(mode="after")
    def _reference(self) -> "EvalConfig":
        if self.reference is None and self.target is None:
            raise ValueError("either a reference samples file or a target spec is required")
        return self


class AblateConfig(_Config):
    seeds: tuple[int, ...] = (0, 1)
    stage1: tuple[bool, ...] = (True, False)
    tweedie: tuple[bool, ...] = (True, False)
    losses: tuple[LossCombo, ...] = ("diff", "spatial", "consistency", "all")
    ranks: tuple[int, ...] = (8, 16, 32, 64)
    include_reflow: bool = True
    phantoms: PhantomConfig = PhantomConfig(n=60, size=16)
    hidden: tuple[int, ...] = (64, 64)
    t_max: int = Field(default=20, ge=2)
    stage1_train: TrainConfig = TrainConfig(steps=300, batch_size=16, log_every=100)
    stage2_train: TrainConfig = TrainConfig(steps=200, batch_size=16, log_every=100)
    sample_steps: int = Field(default=10, ge=1)
    n_generated: int = Field(default=64, ge=17)

    @field_validator("ranks")
    @classmethod
    def _positive_ranks(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if any(r < 1 for r in value):
            raise ValueError("LoRA ranks must be positive")
        return value


class GenPhantomsConfig(_Config):
    seed: int = 0
    phantoms: PhantomConfig = PhantomConfig()


class ReportConfig(_Config):
    runs: tuple[Path, ...] = ()
    title: str = "Rectified flow lab report"
