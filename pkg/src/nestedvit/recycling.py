"""Token recycling between consecutive stages.

The final-layer tokens of stage ``i`` are aligned to stage ``j``'s width and
blended into stage ``j``'s fresh embeddings::

    fused = alpha * align(z_prev) + fresh

``align`` is a learned linear map for the default ``linear`` strategy, or a
parameter-free widening (zero padding after or before, or channel tiling)
for the ablation strategies.  ``alpha`` is an unconstrained learnable scalar,
initialised at 0 so training starts recycling-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .config import FusionSettings, ModelConfig
from .errors import ConfigError, InputError
from .model import trunc_normal
from .tensor import Tensor

STRATEGIES = ("linear", "pad_front_zeros", "pad_back_zeros", "repeat")


@dataclass
class FusionConfig:
    """Fusion parameters for one stage transition ``from_stage -> to_stage``."""

    from_stage: int
    to_stage: int
    d_in: int
    d_out: int
    strategy: str = "linear"
    alpha: Tensor = field(default_factory=lambda: T.parameter(np.zeros((), np.float32)))
    weight: Optional[Tensor] = None
    bias: Optional[Tensor] = None
    include_cls: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown fusion strategy {self.strategy!r}")
        if self.d_in >= self.d_out:
            raise ConfigError(f"fusion needs d_in < d_out, got {self.d_in} -> {self.d_out}")
        has_proj = self.weight is not None
        if has_proj != (self.strategy == "linear"):
            raise ConfigError("a projection is required for 'linear' and forbidden otherwise")
        if has_proj and self.weight.shape != (self.d_in, self.d_out):
            raise ConfigError(
                f"projection shape {self.weight.shape} != {(self.d_in, self.d_out)}"
            )

    @property
    def name(self) -> str:
        return f"{self.from_stage}->{self.to_stage}"

    def parameters(self) -> Dict[str, Tensor]:
        out = {"alpha": self.alpha}
        if self.weight is not None:
            out["proj.weight"] = self.weight
            out["proj.bias"] = self.bias
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def align(self, z_prev: Tensor) -> Tensor:
        if self.strategy == "linear":
            return T.linear(z_prev, self.weight, self.bias)
        lead = z_prev.shape[:-1]
        if self.strategy == "repeat":
            reps = -(-self.d_out // self.d_in)
            tiled = T.concat([z_prev] * reps, axis=-1)
            return tiled if reps * self.d_in == self.d_out else tiled[..., : self.d_out]
        pad = T.zeros(lead + (self.d_out - self.d_in,), dtype=z_prev.dtype)
        parts = [z_prev, pad] if self.strategy == "pad_back_zeros" else [pad, z_prev]
        return T.concat(parts, axis=-1)

    def fuse(self, z_prev: Tensor, fresh: Tensor) -> Tensor:
        return fuse(z_prev, fresh, self)


def fuse(z_prev: Tensor, fresh: Tensor, cfg: FusionConfig) -> Tensor:
    """Blend recycled tokens into fresh embeddings: ``alpha * align(z_prev) + fresh``."""
    if z_prev.ndim != 3 or fresh.ndim != 3:
        raise InputError(f"expected (B, N, d) tokens, got {z_prev.shape} and {fresh.shape}")
    if z_prev.shape[-1] >= fresh.shape[-1]:
        raise ConfigError(
            f"recycled width {z_prev.shape[-1]} must be below target width {fresh.shape[-1]}"
        )
    if z_prev.shape[:2] != fresh.shape[:2]:
        raise InputError(f"token count mismatch: {z_prev.shape} vs {fresh.shape}")
    if z_prev.shape[-1] != cfg.d_in or fresh.shape[-1] != cfg.d_out:
        raise InputError(
            f"transition {cfg.name} expects widths {cfg.d_in}->{cfg.d_out}, "
            f"got {z_prev.shape[-1]}->{fresh.shape[-1]}"
        )
    if not cfg.include_cls:
        patches = T.mul(cfg.alpha, cfg.align(z_prev[:, 1:])) + fresh[:, 1:]
        return T.concat([fresh[:, :1], patches], axis=1)
    return T.mul(cfg.alpha, cfg.align(z_prev)) + fresh


def make_transition(
    config: ModelConfig,
    from_stage: int,
    to_stage: int,
    strategy: str = "linear",
    alpha_init: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    include_cls: bool = True,
) -> FusionConfig:
    """Trainable fusion parameters between two consecutive stages."""
    n = config.num_stages
    if not (0 <= from_stage < n and 0 <= to_stage < n) or to_stage != from_stage + 1:
        raise ConfigError(
            f"transitions join consecutive stages only, got {from_stage} -> {to_stage}"
        )
    d_in, d_out = config.embed_dim(from_stage), config.embed_dim(to_stage)
    rng = np.random.default_rng(0) if rng is None else rng
    weight = bias = None
    if strategy == "linear":
        weight = T.parameter(trunc_normal(rng, (d_in, d_out)))
        bias = T.parameter(np.zeros(d_out, np.float32))
    return FusionConfig(
        from_stage=from_stage,
        to_stage=to_stage,
        d_in=d_in,
        d_out=d_out,
        strategy=strategy,
        alpha=T.parameter(np.asarray(alpha_init, np.float32)),
        weight=weight,
        bias=bias,
        include_cls=include_cls,
    )


def make_transitions(config: ModelConfig, settings: FusionSettings, seed: int = 0) -> List[FusionConfig]:
    """One independent transition per consecutive stage pair."""
    rng = np.random.default_rng([seed, 1])
    return [
        make_transition(
            config, i, i + 1, settings.strategy, settings.alpha_init, rng, settings.include_cls
        )
        for i in range(config.num_stages - 1)
    ]
