"""Run configuration schema.

One JSON document configures a run: ``model`` (geometry and the ordered
nested stages), ``fusion``, ``train``, ``data``, ``inference`` plus the
run-level ``seed`` and ``out`` directory.  Unknown keys are rejected at
every level.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

DEFAULT_TAUS = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 1.3, 1.5, 1.7, 2.0, 2.5]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class StageSpec(_Strict):
    """One nested stage: the first ``heads`` attention heads of the full model."""

    heads: int = Field(gt=0)
    loss_weight: Optional[float] = Field(default=None, ge=0)


class ModelConfig(_Strict):
    image_size: int = Field(gt=0)
    patch_size: int = Field(gt=0)
    in_channels: int = Field(default=3, gt=0)
    num_layers: int = Field(ge=0)
    head_dim: int = Field(default=64, gt=0)
    num_classes: int = Field(gt=1)
    stages: List[StageSpec] = Field(min_length=1)
    eps: float = Field(default=1e-6, gt=0)
    mlp_ratio: int = Field(default=4, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        heads = [s.heads for s in self.stages]
        if any(b <= a for a, b in zip(heads, heads[1:])):
            raise ValueError(f"stage heads must be strictly increasing, got {heads}")
        weights = [s.loss_weight for s in self.stages]
        if any(w is None for w in weights) and any(w is not None for w in weights):
            raise ValueError("loss_weight must be given for all stages or none")
        if weights[0] is None:
            uniform = 1.0 / len(self.stages)
            for s in self.stages:
                s.loss_weight = uniform
        if not any(s.loss_weight > 0 for s in self.stages):
            raise ValueError("at least one stage loss_weight must be positive")
        return self

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    def embed_dim(self, stage: int) -> int:
        return self.stages[stage].heads * self.head_dim

    def heads(self, stage: int) -> int:
        return self.stages[stage].heads

    @property
    def max_dim(self) -> int:
        return self.embed_dim(self.num_stages - 1)

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size**2

    @property
    def loss_weights(self) -> List[float]:
        return [s.loss_weight for s in self.stages]


class FusionSettings(_Strict):
    strategy: Literal["linear", "pad_front_zeros", "pad_back_zeros", "repeat"] = "linear"
    alpha_init: float = 0.0
    include_cls: bool = True


class TrainConfig(_Strict):
    epochs: int = Field(default=1, ge=1)
    steps: Optional[int] = Field(default=None, ge=1)
    batch_size: int = Field(default=32, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    weight_decay: float = Field(default=0.05, ge=0)
    optimizer: Literal["sgd_momentum", "adamw"] = "adamw"
    momentum: float = Field(default=0.9, ge=0, lt=1)
    betas: List[float] = Field(default=[0.9, 0.999], min_length=2, max_length=2)
    schedule: Literal["constant", "cosine"] = "cosine"
    strategy: Literal["joint", "sandwich", "stochastic"] = "joint"
    loss_weights: Optional[List[float]] = None
    grad_clip: Optional[float] = Field(default=None, gt=0)
    checkpoint_every: Optional[int] = Field(default=None, ge=1)

    @field_validator("loss_weights")
    @classmethod
    def _weights(cls, v):
        if v is None:
            return v
        if any(w < 0 for w in v):
            raise ValueError("loss weights must be non-negative")
        if not any(w > 0 for w in v):
            raise ValueError("at least one loss weight must be positive")
        return v


class DataSettings(_Strict):
    source: Literal["synthetic", "idx"] = "synthetic"
    path: Optional[str] = None
    num_train: int = Field(default=512, ge=1)
    num_val: int = Field(default=256, ge=1)
    difficulty_mix: float = 0.5
    val_fraction: float = Field(default=0.2, gt=0, lt=1)
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _check(self):
        if self.source == "idx" and not self.path:
            raise ValueError("data.path is required when source is 'idx'")
        return self


class InferenceSettings(_Strict):
    tau: Union[float, List[float]] = 1.0
    taus: List[float] = Field(default_factory=lambda: list(DEFAULT_TAUS), min_length=1)
    batch_size: int = Field(default=256, ge=1)

    @field_validator("taus")
    @classmethod
    def _sorted(cls, v):
        if any(t < 0 for t in v):
            raise ValueError("thresholds must be non-negative")
        if sorted(v) != list(v):
            raise ValueError("taus must be sorted ascending")
        return v


class RunConfig(_Strict):
    model: ModelConfig
    fusion: FusionSettings = FusionSettings()
    train: TrainConfig = TrainConfig()
    data: DataSettings = DataSettings()
    inference: InferenceSettings = InferenceSettings()
    seed: int = 0
    out: str = "runs/default"

    @model_validator(mode="after")
    def _resolve(self):
        n = self.model.num_stages
        if self.train.loss_weights is None:
            self.train.loss_weights = list(self.model.loss_weights)
        elif len(self.train.loss_weights) != n:
            raise ValueError(
                f"train.loss_weights has {len(self.train.loss_weights)} entries for {n} stages"
            )
        if self.train.strategy != "joint" and n < 3:
            raise ValueError(f"strategy {self.train.strategy!r} needs at least 3 stages, got {n}")
        if isinstance(self.inference.tau, list) and len(self.inference.tau) != n - 1:
            raise ValueError("per-transition tau list needs one entry per stage transition")
        return self

    def resolved(self) -> dict:
        return json.loads(self.model_dump_json())


def parse_tau(text: str) -> float:
    """Parse a threshold, accepting ``inf`` as the never-continue sentinel."""
    value = float(text)
    if math.isnan(value) or value < 0:
        raise ValueError(f"invalid threshold {text!r}")
    return value


def load_config(path) -> RunConfig:
    with open(Path(path)) as fh:
        return RunConfig.model_validate(json.load(fh))


def deit_geometry(heads=(3,), num_layers=12, image_size=224, patch_size=16, num_classes=1000) -> ModelConfig:
    """The DeiT family geometry (head width 64, MLP ratio 4)."""
    return ModelConfig(
        image_size=image_size,
        patch_size=patch_size,
        num_layers=num_layers,
        head_dim=64,
        num_classes=num_classes,
        stages=[StageSpec(heads=h) for h in heads],
    )
