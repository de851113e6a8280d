# app/schemas.py
import math
from typing import Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from app import config

Arm = Literal["graphfedmig", "local", "fedavg", "flhc"]
ABLATION_NAMES = ("gan", "mi_loss", "migma")


class SplitSpec(BaseModel):
    train: float = Field(default=config.DEFAULT_SPLIT[0], ge=0.0, le=1.0)
    val: float = Field(default=config.DEFAULT_SPLIT[1], ge=0.0, le=1.0)
    test: float = Field(default=config.DEFAULT_SPLIT[2], ge=0.0, le=1.0)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_total(self) -> "SplitSpec":
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValueError("Доли train/val/test должны давать в сумме 1")
        return self


class SbmConfig(BaseModel):
    """Параметры синтетической федерации на стохастической блочной модели"""

    num_clients: int = Field(default=8, ge=1)
    nodes_per_client: tuple[int, int] = (600, 600)
    num_classes: int = Field(default=4, ge=2)
    feature_dim: int = Field(default=16, ge=1)
    minority_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)
    # Если не задано: последний класс миноритарный, остальные делят остаток поровну
    class_proportions: Optional[list[float]] = None
    p_intra: float = Field(default=0.05, ge=0.0, le=1.0)
    p_inter: float = Field(default=0.005, ge=0.0, le=1.0)
    separation: float = Field(default=1.0, ge=0.0)
    noise: float = Field(default=1.0, ge=0.0)
    client_shift: float = Field(default=0.5, ge=0.0)
    seed: Optional[int] = Field(default=None, ge=0)
    split: SplitSpec = Field(default_factory=SplitSpec)

    @field_validator("nodes_per_client")
    @classmethod
    def validate_range(cls, v: tuple[int, int]) -> tuple[int, int]:
        low, high = v
        if low < 1 or high < low:
            raise ValueError("nodes_per_client должен быть диапазоном 1 <= min <= max")
        return v

    @model_validator(mode="after")
    def check_proportions(self) -> "SbmConfig":
        props = self.proportions()
        if len(props) != self.num_classes:
            raise ValueError("class_proportions должен содержать H значений")
        if any(p < 0 for p in props) or abs(sum(props) - 1.0) > 1e-9:
            raise ValueError("class_proportions должны быть неотрицательны и давать в сумме 1")
        if min(props) >= 1.0 / self.num_classes:
            raise ValueError("Доля миноритарного класса должна быть меньше 1/H")
        if self.p_intra <= self.p_inter:
            raise ValueError("p_intra должна быть больше p_inter")
        return self

    def proportions(self) -> list[float]:
        if self.class_proportions is not None:
            return list(self.class_proportions)
        rest = (1.0 - self.minority_fraction) / (self.num_classes - 1)
        return [rest] * (self.num_classes - 1) + [self.minority_fraction]


class CsvSource(BaseModel):
    edges: str
    features: str
    labels: str
    num_classes: Optional[int] = Field(default=None, ge=2)
    num_clients: int = Field(default=8, ge=1)
    size_range: tuple[int, int] = config.DEFAULT_SIZE_RANGE
    split: SplitSpec = Field(default_factory=SplitSpec)


class DpConfig(BaseModel):
    enabled: bool = False
    epsilon: float = Field(default=1.0, gt=0.0)
    delta: float = Field(default=1e-5, gt=0.0, lt=1.0)
    clip_norm: float = Field(default=1.0, gt=0.0)
    per_count_sensitivity: bool = False


class AblationFlags(BaseModel):
    """Компоненты поверх кластеризации (строки таблицы абляций)"""

    gan: bool = True
    mi_loss: bool = True
    migma: bool = True

    @classmethod
    def disabling(cls, names: list[str]) -> "AblationFlags":
        unknown = set(names) - set(ABLATION_NAMES)
        if unknown:
            raise ValueError(f"Неизвестные компоненты абляции: {sorted(unknown)}")
        return cls(**{name: name not in names for name in ABLATION_NAMES})


class ExperimentConfig(BaseModel):
    sbm: Optional[SbmConfig] = None
    csv: Optional[CsvSource] = None
    data_dir: Optional[str] = None
    arm: Arm = "graphfedmig"
    rounds: int = Field(default=config.DEFAULT_ROUNDS, ge=1)
    threshold: float = Field(default=config.DEFAULT_THRESHOLD, gt=-1.0, le=1.0)
    clusters: Optional[int] = Field(default=None, ge=1)
    lambda1: float = Field(default=config.DEFAULT_LAMBDA1, ge=0.0)
    lambda2: float = Field(default=config.DEFAULT_LAMBDA2, ge=0.0)
    gamma: float = Field(default=config.DEFAULT_GAMMA, gt=0.0, le=1.0)
    local_epochs: int = Field(default=config.DEFAULT_LOCAL_EPOCHS, ge=0)
    pre_epochs: int = Field(default=config.DEFAULT_PRE_EPOCHS, ge=0)
    d_steps: int = Field(default=config.DEFAULT_D_STEPS, ge=0)
    learning_rate: float = Field(default=config.DEFAULT_LEARNING_RATE, ge=0.0)
    temperature: float = Field(default=config.DEFAULT_TEMPERATURE, gt=0.0)
    feature_dim: int = Field(default=config.FEATURE_DIM, ge=1)
    dp: DpConfig = Field(default_factory=DpConfig)
    seed: int = Field(default=0, ge=0, lt=2**64)
    ablation: AblationFlags = Field(default_factory=AblationFlags)
    minority_classes: Optional[list[int]] = None
    out_dir: str = "runs/latest"
    checkpoint_every: int = Field(default=0, ge=0)
    workers: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def check_source(self) -> "ExperimentConfig":
        sources = [s for s in (self.sbm, self.csv, self.data_dir) if s is not None]
        if len(sources) > 1:
            raise ValueError("Нужен ровно один источник данных: sbm, csv или data_dir")
        if not sources:
            self.sbm = SbmConfig()
        return self

    def effective_lambdas(self) -> tuple[float, float]:
        """λ1, λ2 с учётом флагов абляции"""
        lambda1 = self.lambda1 if self.ablation.gan else 0.0
        lambda2 = self.lambda2 if self.ablation.mi_loss else 0.0
        return lambda1, lambda2


class LossBreakdown(BaseModel):
    ce: float
    gan: float = 0.0
    mi: float = 0.0
    composite: float
    lambda1: float = 0.0
    lambda2: float = 0.0


class MetricsBundle(BaseModel):
    overall_accuracy: float = Field(ge=0.0, le=1.0)
    minority_accuracy: float = Field(ge=0.0, le=1.0)
    overall_recall: float = Field(ge=0.0, le=1.0)
    minority_recall: float = Field(ge=0.0, le=1.0)
    # None для классов без тестовых узлов
    per_class_recall: list[Optional[float]]


class RoundReport(BaseModel):
    round: int
    arm: str
    losses: dict[int, LossBreakdown]
    mi: dict[int, float] = Field(default_factory=dict)
    weights: dict[int, float] = Field(default_factory=dict)
    metrics: MetricsBundle
    bytes_uploaded: dict[int, int]
    bytes_downloaded: dict[int, int]

    def mean_loss(self, component: str) -> float:
        if not self.losses:
            return 0.0
        return math.fsum(getattr(b, component) for b in self.losses.values()) / len(self.losses)

    @property
    def total_uploaded(self) -> int:
        return sum(self.bytes_uploaded.values())

    @property
    def total_downloaded(self) -> int:
        return sum(self.bytes_downloaded.values())


class TensorBlob(BaseModel):
    name: str
    shape: list[int]
    values: list[float]

    @model_validator(mode="after")
    def check_size(self) -> "TensorBlob":
        if math.prod(self.shape) != len(self.values):
            raise ValueError(f"Тензор {self.name}: размер не совпадает с формой")
        return self


class CheckpointBlob(BaseModel):
    format: Literal["fedmig-params"] = config.CHECKPOINT_FORMAT
    version: int = config.CHECKPOINT_VERSION
    kind: Literal["generator", "discriminator", "projection"]
    tensors: list[TensorBlob]
