"""Pydantic models describing run configuration documents and reports."""
from __future__ import annotations

from enum import Enum
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Dimension(str, Enum):
    """Axis a triple-attention block calibrates."""

    SPATIAL = "spatial"
    CHANNEL = "channel"
    TEMPORAL = "temporal"


class PoolingMethod(str, Enum):
    """Temporal aggregation branches, in the order their weights are produced."""

    MEAN = "mean"
    MAX = "max"
    GEM = "gem"


class Condition(str, Enum):
    """Walking condition of a silhouette sequence."""

    NM = "NM"
    BG = "BG"
    CL = "CL"


class StrictModel(BaseModel):
    """Base for config sections: unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelConfig(StrictModel):
    """Architecture and objective settings, including every ablation switch."""

    stage_channels: tuple[int, int, int] = (32, 64, 128)
    clip_length: int = Field(default=30, ge=1)
    resolution: tuple[int, int] = (64, 44)
    bins: int = Field(default=8, ge=1)
    embed_dim: int = Field(default=64, ge=1)
    kernel_set: tuple[int, ...] = (1, 3, 5)
    ratio: int = Field(default=2, ge=1)
    mta_mode: Literal["meta", "static"] = "meta"
    gate: bool = True
    mta_dims: tuple[Dimension, ...] = (Dimension.SPATIAL, Dimension.CHANNEL, Dimension.TEMPORAL)
    mta_stages: tuple[int, ...] = (0, 1, 2)
    pooling: tuple[PoolingMethod, ...] = (PoolingMethod.MEAN, PoolingMethod.MAX, PoolingMethod.GEM)
    weighting: Literal["meta", "static", "none"] = "meta"
    gem_p: float = Field(default=3.0, ge=1.0, le=128.0)
    margin: float = Field(default=0.2, ge=0.0)
    learning_rate: float = Field(default=1e-4, gt=0.0)
    seed: int = 0

    @field_validator("stage_channels", "resolution")
    @classmethod
    def positive_extents(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if any(v < 1 for v in value):
            raise ValueError(f"extents must be positive, got {value}")
        return value

    @field_validator("kernel_set")
    @classmethod
    def odd_kernels(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if not value:
            raise ValueError("kernel_set needs at least one kernel size")
        if any(k < 1 or k % 2 == 0 for k in value):
            raise ValueError(f"kernel sizes must be positive and odd, got {value}")
        return value

    @field_validator("mta_dims", "pooling", "mta_stages")
    @classmethod
    def unique_entries(cls, value: tuple) -> tuple:
        if len(set(value)) != len(value):
            raise ValueError(f"entries must be unique, got {value}")
        return value

    @model_validator(mode="after")
    def check_geometry(self) -> ModelConfig:
        height, width = self.resolution
        if height % 4 or width % 4:
            raise ValueError(f"resolution {self.resolution} must be divisible by 4 (two 2x downsamplings)")
        if (height // 4) % self.bins:
            raise ValueError(f"bins={self.bins} must divide the final feature height {height // 4}")
        if not self.pooling:
            raise ValueError("at least one pooling branch must be enabled")
        if any(stage not in (0, 1, 2) for stage in self.mta_stages):
            raise ValueError(f"mta_stages must be drawn from (0, 1, 2), got {self.mta_stages}")
        if Dimension.CHANNEL in self.mta_dims:
            for stage in self.mta_stages:
                if self.stage_channels[stage] % self.ratio:
                    raise ValueError(
                        f"ratio {self.ratio} must divide stage {stage} channels {self.stage_channels[stage]}"
                    )
        if Dimension.TEMPORAL in self.mta_dims and self.mta_stages and self.clip_length % self.ratio:
            raise ValueError(f"ratio {self.ratio} must divide clip_length {self.clip_length}")
        return self


class GeneratorConfig(StrictModel):
    """Synthetic gait generator document."""

    n_ids: int = Field(default=24, ge=2)
    views: tuple[int, ...] = tuple(range(0, 181, 18))
    conditions: tuple[Condition, ...] = (Condition.NM, Condition.BG, Condition.CL)
    frames: int = Field(default=30, ge=1)
    resolution: tuple[int, int] = (64, 44)
    seed: int = 0
    nm_sequences: int = Field(default=6, ge=1)
    sequences_per_condition: int = Field(default=2, ge=1)
    train_ids: int | None = Field(default=None, ge=1)

    @model_validator(mode="after")
    def check_split(self) -> GeneratorConfig:
        if not self.views:
            raise ValueError("views must not be empty")
        if not self.conditions:
            raise ValueError("conditions must not be empty")
        if self.train_ids is not None and self.train_ids >= self.n_ids:
            raise ValueError(f"train_ids={self.train_ids} leaves no test identities out of {self.n_ids}")
        return self


class DataConfig(StrictModel):
    """Either an on-disk dataset root or a synthetic generator document."""

    root: Path | None = None
    generator: GeneratorConfig | None = None
    train_ids: int | Literal["st", "mt", "lt"] | None = None

    @field_validator("train_ids")
    @classmethod
    def positive_split(cls, value: int | str | None) -> int | str | None:
        if isinstance(value, int) and value < 1:
            raise ValueError(f"train_ids must be positive, got {value}")
        return value

    @model_validator(mode="after")
    def exactly_one_source(self) -> DataConfig:
        if (self.root is None) == (self.generator is None):
            raise ValueError("data needs exactly one of 'root' or 'generator'")
        return self


class TrainConfig(StrictModel):
    steps: int = Field(default=2000, ge=1)
    batch_ids: int = Field(default=8, ge=2)
    batch_sequences: int = Field(default=8, ge=1)
    log_every: int = Field(default=50, ge=1)
    checkpoint_every: int = Field(default=500, ge=1)
    seed: int = 0


class EvalConfig(StrictModel):
    gallery_condition: Condition = Condition.NM
    gallery_sequences: int = Field(default=4, ge=1)
    max_rank: int = Field(default=1, ge=1)
    workers: int = Field(default=1, ge=1)


class GradCheckConfig(StrictModel):
    eps: float = Field(default=1e-5, gt=0.0)
    tolerance: float = Field(default=1e-4, gt=0.0)
    entries_per_param: int = Field(default=3, ge=1)
    seed: int = 0


class RunConfig(StrictModel):
    """The single JSON document every command reads."""

    model: ModelConfig = ModelConfig()
    data: DataConfig = DataConfig(generator=GeneratorConfig())
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    gradcheck: GradCheckConfig = GradCheckConfig()
    output_dir: Path = Path("runs/default")

    @model_validator(mode="after")
    def check_resolution(self) -> RunConfig:
        generator = self.data.generator
        if generator is not None and generator.resolution != self.model.resolution:
            raise ValueError(
                f"generator resolution {generator.resolution} differs from model resolution {self.model.resolution}"
            )
        return self


class ViewAccuracy(StrictModel):
    """One row of the per-view report."""

    condition: Condition
    view: int
    rank1: float = Field(ge=0.0, le=100.0)
    probes: int = Field(ge=0)
    excluded: int = Field(ge=0)


class ConditionSummary(StrictModel):
    """One row of the summary report."""

    condition: Condition
    mean_rank1: float = Field(ge=0.0, le=100.0)
    mAP: float = Field(ge=0.0, le=100.0)
    probes: int = Field(ge=0)
    gallery: int = Field(ge=0)
    excluded: int = Field(ge=0)
    cmc: tuple[float, ...] = ()
