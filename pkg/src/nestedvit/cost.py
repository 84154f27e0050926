"""Analytic multiply-accumulate and parameter accounting.

Convention: only dense multiplications are counted (patch projection,
QKV, attention scores and value aggregation, attention output, MLP,
classifier on the CLS token, recycling projection).  Biases, norms,
softmax and activations are excluded.  GMACs = 1e9 MACs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, ThresholdLookupError
from .model import count_params

CONVENTION = "dense multiplications only (norms, softmax, activations, biases excluded); GMACs = 1e9 MACs"


def stage_macs(config: ModelConfig, stage: int) -> int:
    """MACs of one standalone forward of the stage subnetwork for one image."""
    if not 0 <= stage < config.num_stages:
        raise ConfigError(f"unknown stage {stage}")
    d = config.embed_dim(stage)
    P, N = config.num_patches, config.num_tokens
    hidden = config.mlp_ratio * d
    patch = P * config.patch_dim * d
    per_layer = (
        3 * N * d * d  # qkv
        + 2 * N * N * d  # scores and value aggregation over all heads
        + N * d * d  # attention output
        + 2 * N * d * hidden  # mlp in and out
    )
    return patch + config.num_layers * per_layer + d * config.num_classes


def projection_macs(config: ModelConfig, from_stage: int, to_stage: int, strategy: str = "linear") -> int:
    if strategy != "linear":
        return 0
    return config.num_tokens * config.embed_dim(from_stage) * config.embed_dim(to_stage)


def _strategies(config: ModelConfig, transitions) -> List[str]:
    if transitions is None:
        return ["linear"] * (config.num_stages - 1)
    return [t if isinstance(t, str) else t.strategy for t in transitions]


def incremental_macs(config: ModelConfig, transitions=None) -> List[int]:
    """Per-stage cost of entering that stage: stage forward plus its inbound projection."""
    strategies = _strategies(config, transitions)
    out = [stage_macs(config, 0)]
    for k in range(1, config.num_stages):
        out.append(stage_macs(config, k) + projection_macs(config, k - 1, k, strategies[k - 1]))
    return out


def path_macs(config: ModelConfig, executed_stages: Sequence[int], transitions=None) -> int:
    executed = list(executed_stages)
    if not executed or executed != list(range(len(executed))) or len(executed) > config.num_stages:
        raise ConfigError(f"executed stages must be a non-empty prefix, got {executed}")
    return sum(incremental_macs(config, transitions)[: len(executed)])


def stage_gmacs(config: ModelConfig, stage: int) -> float:
    return stage_macs(config, stage) / 1e9


def path_gmacs(config: ModelConfig, executed_stages: Sequence[int], transitions=None) -> float:
    return path_macs(config, executed_stages, transitions) / 1e9


def halting_path_gmacs(config: ModelConfig, transitions=None) -> List[float]:
    """GMACs of the path that halts after stage k, for every k."""
    inc = incremental_macs(config, transitions)
    return [sum(inc[: k + 1]) / 1e9 for k in range(config.num_stages)]


def mean_path_gmacs(halted_stages, path_costs: Sequence[float]) -> float:
    """Average executed-path cost over samples given each sample's halting stage.

    Shared by the inference sweep and :func:`expected_gmacs` so both report
    identical numbers on identical traces.
    """
    halted = np.asarray(halted_stages, dtype=np.int64)
    counts = np.bincount(halted, minlength=len(path_costs))
    total = 0.0
    for count, cost in zip(counts.tolist(), path_costs):
        total += count * cost
    return total / halted.size


def expected_gmacs(report, tau: float) -> float:
    """Mean GMACs per sample of a routing report replayed at ``tau``."""
    if not report.has_tau(tau):
        raise ThresholdLookupError(f"tau {tau} not in report (have {report.taus})")
    return mean_path_gmacs(report.halted_stages(tau), report.path_gmacs)


@dataclass
class StageCost:
    stage: int
    heads: int
    embed_dim: int
    params: int
    gmacs_stage: float
    gmacs_incremental: float
    gmacs_path: float


@dataclass
class CostReport:
    stages: List[StageCost]
    total_params: int
    transition_params: int
    convention: str = CONVENTION
    notes: List[str] = field(default_factory=list)

    def rows(self) -> List[dict]:
        return [vars(s).copy() for s in self.stages]

    def to_csv(self) -> str:
        cols = ["stage", "heads", "embed_dim", "params", "gmacs_stage", "gmacs_incremental", "gmacs_path"]
        lines = [",".join(cols)]
        for s in self.stages:
            values = [s.stage + 1] + [getattr(s, c) for c in cols[1:]]
            lines.append(",".join(_fmt(v) for v in values))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        head = f"{'stage':>5} {'heads':>5} {'dim':>5} {'params[M]':>10} {'GMACs':>8} {'incr':>8} {'path':>8}"
        lines = [f"# MACs convention: {self.convention}", head]
        for s in self.stages:
            lines.append(
                f"{s.stage + 1:>5} {s.heads:>5} {s.embed_dim:>5} {s.params / 1e6:>10.2f} "
                f"{s.gmacs_stage:>8.2f} {s.gmacs_incremental:>8.2f} {s.gmacs_path:>8.2f}"
            )
        lines.append(
            f"total params: {self.total_params / 1e6:.2f}M "
            f"(backbone {(self.total_params - self.transition_params) / 1e6:.2f}M, "
            f"transitions {self.transition_params})"
        )
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "convention": self.convention,
            "stages": self.rows(),
            "total_params": self.total_params,
            "transition_params": self.transition_params,
        }


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def transition_param_count(config: ModelConfig, strategy: str = "linear") -> int:
    total = 0
    for k in range(1, config.num_stages):
        total += 1  # alpha
        if strategy == "linear":
            total += config.embed_dim(k - 1) * config.embed_dim(k) + config.embed_dim(k)
    return total


def cost_report(config: ModelConfig, strategy: str = "linear") -> CostReport:
    strategies = [strategy] * (config.num_stages - 1)
    inc = incremental_macs(config, strategies)
    stages = []
    running = 0
    for k in range(config.num_stages):
        running += inc[k]
        stages.append(StageCost(
            stage=k,
            heads=config.heads(k),
            embed_dim=config.embed_dim(k),
            params=count_params(config, k),
            gmacs_stage=stage_gmacs(config, k),
            gmacs_incremental=inc[k] / 1e9,
            gmacs_path=running / 1e9,
        ))
    extra = transition_param_count(config, strategy)
    return CostReport(stages, count_params(config) + extra, extra)
