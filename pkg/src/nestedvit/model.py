"""Prefix-sliceable Vision Transformer.

A single full-width parameter set serves every stage.  Stage ``i`` uses the
first ``d_i = heads_i * head_dim`` embedding channels, the first ``heads_i``
attention heads and the first ``mlp_ratio * d_i`` MLP hidden units of every
tensor, so the stage-``i`` network is the leading block of the stage-``j``
network for ``i < j``.

Layout conventions (all weights stored as (in, out)):

* ``patch.weight``  (C*p*p, D)  patch pixels flattened in (channel, row, col) order
* ``pos``           (P+1, D)    row 0 belongs to the CLS token
* ``blocks.L.attn.qkv.weight`` (3, D, D) with q/k/v stacked on the first axis;
  within each, head ``t`` owns output columns ``[t*head_dim, (t+1)*head_dim)``
* ``head.weight``   (D, C)      input rows sliced, all classes kept

Blocks are pre-norm: ``x + MHA(LN(x))`` then ``x + MLP(LN(x))``.  The
classifier reads the final-layernormed CLS token; the recycled tokens are
the raw output of the last block.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .config import ModelConfig, StageSpec
from .entropy import entropy_from_logits
from .errors import ConfigError, InputError
from .tensor import Tensor

INIT_STD = 0.02


@dataclass
class StageOutput:
    logits: Tensor
    tokens: Tensor
    entropy: np.ndarray
    stage_index: int


def trunc_normal(rng: np.random.Generator, shape, std=INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


def param_shapes(config: ModelConfig) -> Dict[str, tuple]:
    """Full-width parameter inventory in canonical order."""
    D, C = config.max_dim, config.num_classes
    H = config.mlp_ratio * D
    shapes = {
        "patch.weight": (config.patch_dim, D),
        "patch.bias": (D,),
        "cls": (D,),
        "pos": (config.num_tokens, D),
    }
    for layer in range(config.num_layers):
        p = f"blocks.{layer}."
        shapes.update({
            p + "norm1.weight": (D,),
            p + "norm1.bias": (D,),
            p + "attn.qkv.weight": (3, D, D),
            p + "attn.qkv.bias": (3, D),
            p + "attn.proj.weight": (D, D),
            p + "attn.proj.bias": (D,),
            p + "norm2.weight": (D,),
            p + "norm2.bias": (D,),
            p + "mlp.fc1.weight": (D, H),
            p + "mlp.fc1.bias": (H,),
            p + "mlp.fc2.weight": (H, D),
            p + "mlp.fc2.bias": (D,),
        })
    shapes.update({
        "norm.weight": (D,),
        "norm.bias": (D,),
        "head.weight": (D, C),
        "head.bias": (C,),
    })
    return shapes


def slice_index(name: str, d: int, hidden: int) -> tuple:
    """Leading-block index selecting the width-``d`` view of parameter ``name``."""
    kind = ".".join(name.rsplit(".", 2)[-2:])
    if name in ("patch.weight", "pos"):
        return (slice(None), slice(0, d))
    if name == "head.weight":
        return (slice(0, d), slice(None))
    if name == "head.bias":
        return (slice(None),)
    if kind == "qkv.weight":
        return (slice(None), slice(0, d), slice(0, d))
    if kind == "qkv.bias":
        return (slice(None), slice(0, d))
    if kind == "fc1.weight":
        return (slice(0, d), slice(0, hidden))
    if kind == "fc1.bias":
        return (slice(0, hidden),)
    if kind == "fc2.weight":
        return (slice(0, hidden), slice(0, d))
    if kind == "proj.weight":
        return (slice(0, d), slice(0, d))
    return (slice(0, d),)


def count_params(config: ModelConfig, stage: Optional[int] = None) -> int:
    """Exact parameter count of the stage subnetwork (full model when ``stage`` is None)."""
    stage = config.num_stages - 1 if stage is None else stage
    if not 0 <= stage < config.num_stages:
        raise ConfigError(f"unknown stage {stage}")
    d = config.embed_dim(stage)
    h = config.mlp_ratio * d
    C = config.num_classes
    embed = config.patch_dim * d + d + d + config.num_tokens * d
    per_layer = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d)
    return embed + config.num_layers * per_layer + 2 * d + d * C + C


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, P, C*patch*patch), patches in row-major grid order."""
    B, C, H, W = images.shape
    gh, gw = H // patch, W // patch
    x = images.reshape(B, C, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(B, gh * gw, C * patch * patch))


class NestedViT:
    """Full-width nested ViT whose stages are prefix views of one parameter set."""

    def __init__(self, config: ModelConfig, seed: int = 0, params: Optional[Dict[str, Tensor]] = None):
        self.config = config
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = params

    def _init_params(self, rng) -> Dict[str, Tensor]:
        params = {}
        for name, shape in param_shapes(self.config).items():
            if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm.weight":
                data = np.ones(shape, np.float32)
            elif name.endswith("bias"):
                data = np.zeros(shape, np.float32)
            else:
                data = trunc_normal(rng, shape)
            params[name] = T.parameter(data, name=name)
        return params

    # -- slicing -----------------------------------------------------------------
    def _check_stage(self, stage) -> int:
        if isinstance(stage, StageSpec):
            matches = [i for i, s in enumerate(self.config.stages) if s.heads == stage.heads]
            if not matches:
                raise ConfigError(f"stage with {stage.heads} heads not in config")
            return matches[0]
        if not isinstance(stage, (int, np.integer)) or not 0 <= stage < self.config.num_stages:
            raise ConfigError(f"unknown stage {stage!r}")
        return int(stage)

    def region(self, name: str, stage) -> tuple:
        stage = self._check_stage(stage)
        d = self.config.embed_dim(stage)
        return slice_index(name, d, self.config.mlp_ratio * d)

    def slice_view(self, stage) -> Dict[str, Tensor]:
        """Stage-sized parameters as differentiable leading-block views."""
        stage = self._check_stage(stage)
        if stage == self.config.num_stages - 1:
            return dict(self.params)
        return {name: p[self.region(name, stage)] for name, p in self.params.items()}

    def materialize(self, stage) -> "NestedViT":
        """A standalone single-stage model holding copies of the stage slice."""
        stage = self._check_stage(stage)
        cfg = self.config.model_copy(
            update={"stages": [StageSpec(heads=self.config.heads(stage), loss_weight=1.0)]}
        )
        params = {
            name: T.parameter(np.array(p.data[self.region(name, stage)]), name=name)
            for name, p in self.params.items()
        }
        return NestedViT(cfg, params=params)

    def num_params(self, stage=None) -> int:
        stage = self.config.num_stages - 1 if stage is None else self._check_stage(stage)
        return sum(int(p.data[self.region(n, stage)].size) for n, p in self.params.items())

    def parameters(self):
        return list(self.params.values())

    # -- forward -----------------------------------------------------------------
    def _images(self, images) -> np.ndarray:
        arr = images.data if isinstance(images, Tensor) else np.asarray(images, np.float32)
        c = self.config
        want = (c.in_channels, c.image_size, c.image_size)
        if arr.ndim != 4 or arr.shape[1:] != want:
            raise InputError(f"images must have shape (B, {', '.join(map(str, want))}), got {arr.shape}")
        return arr

    def patch_embed(self, images, stage, view=None) -> Tensor:
        """Patch projection plus positional embedding: (B, P, d)."""
        stage = self._check_stage(stage)
        view = self.slice_view(stage) if view is None else view
        patches = Tensor(patchify(self._images(images), self.config.patch_size))
        x = T.linear(patches, view["patch.weight"], view["patch.bias"])
        return x + view["pos"][1:]

    def embed(self, images, stage, view=None) -> Tensor:
        """Fresh stage input: CLS token prepended to the patch embeddings, (B, P+1, d)."""
        stage = self._check_stage(stage)
        view = self.slice_view(stage) if view is None else view
        x = self.patch_embed(images, stage, view)
        cls = view["cls"] + view["pos"][0]
        B, d = x.shape[0], x.shape[2]
        cls = T.mul(T.Tensor(np.ones((B, 1, 1), x.dtype)), cls.reshape(1, 1, d))
        return T.concat([cls, x], axis=1)

    def forward_stage(self, tokens: Tensor, stage, view=None) -> StageOutput:
        stage = self._check_stage(stage)
        c = self.config
        d, heads = c.embed_dim(stage), c.heads(stage)
        if tokens.ndim != 3 or tokens.shape[2] != d:
            raise InputError(f"stage {stage} expects token width {d}, got shape {tokens.shape}")
        view = self.slice_view(stage) if view is None else view
        x = tokens
        for layer in range(c.num_layers):
            x = _block(x, view, f"blocks.{layer}.", heads, c.head_dim, c.eps)
        cls = T.layernorm(x[:, 0], view["norm.weight"], view["norm.bias"], c.eps)
        logits = T.linear(cls, view["head.weight"], view["head.bias"])
        return StageOutput(logits, x, entropy_from_logits(logits.data), stage)

    def forward(self, images, stage) -> StageOutput:
        """Single stage on fresh embeddings (no recycling)."""
        view = self.slice_view(stage)
        return self.forward_stage(self.embed(images, stage, view), stage, view)


def _block(x: Tensor, p, prefix: str, heads: int, head_dim: int, eps: float) -> Tensor:
    h = T.layernorm(x, p[prefix + "norm1.weight"], p[prefix + "norm1.bias"], eps)
    x = x + _attention(h, p, prefix, heads, head_dim)
    h = T.layernorm(x, p[prefix + "norm2.weight"], p[prefix + "norm2.bias"], eps)
    h = T.gelu(T.linear(h, p[prefix + "mlp.fc1.weight"], p[prefix + "mlp.fc1.bias"]))
    return x + T.linear(h, p[prefix + "mlp.fc2.weight"], p[prefix + "mlp.fc2.bias"])


def _attention(x: Tensor, p, prefix: str, heads: int, head_dim: int) -> Tensor:
    B, N, d = x.shape
    w = p[prefix + "attn.qkv.weight"]
    b = p[prefix + "attn.qkv.bias"]
    # (3, d, d) -> (d, 3d) so q, k, v come out of one product
    qkv = T.linear(x, w.transpose(1, 0, 2).reshape(d, 3 * d), b.reshape(3 * d))
    qkv = qkv.reshape(B, N, 3, heads, head_dim).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(head_dim))
    ctx = T.matmul(T.softmax(scores, axis=-1), v)
    ctx = ctx.transpose(0, 2, 1, 3).reshape(B, N, d)
    return T.linear(ctx, p[prefix + "attn.proj.weight"], p[prefix + "attn.proj.bias"])
