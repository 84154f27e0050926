"""Joint multi-stage training.

Every step runs the stage chain with token recycling between consecutive
stages and back-propagates ``sum_i lambda_i * CE_i`` through the shared
prefix weights, the projections and the recycling scalars.  The sampled
strategies train a subset of stages per step:

* ``sandwich``   smallest + largest + one uniformly drawn middle stage
* ``stochastic`` one uniformly drawn stage

The chain always executes up to the deepest visited stage.  Parameters are
updated only inside the leading block of the deepest stage whose loss
contributes, so channels exclusive to untrained stages stay unchanged.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .errors import ConfigError, NonFiniteLossError
from .inference import forward_all_stages
from .model import NestedViT, StageOutput
from .optim import learning_rate, make_optimizer
from .recycling import FusionConfig

log = logging.getLogger(__name__)


def run_chain(model: NestedViT, transitions: List[FusionConfig], images, deepest: int) -> List[StageOutput]:
    """Stages ``0..deepest`` on the full batch with recycling, graph recorded."""
    outputs = []
    z_prev = None
    for k in range(deepest + 1):
        view = model.slice_view(k)
        fresh = model.embed(images, k, view)
        x = fresh if k == 0 else transitions[k - 1].fuse(z_prev, fresh)
        out = model.forward_stage(x, k, view)
        outputs.append(out)
        z_prev = out.tokens
    return outputs


def joint_loss(outputs: List[StageOutput], labels, weights, stages=None):
    """λ-weighted sum of per-stage mean cross-entropies.

    Returns ``(total, per_stage)`` where ``total`` is None when no visited
    stage carries positive weight.
    """
    stages = range(len(outputs)) if stages is None else stages
    total = None
    per_stage = {}
    for k in stages:
        ce = T.cross_entropy(outputs[k].logits, labels)
        per_stage[k] = ce
        if weights[k] > 0:
            term = T.mul(ce, float(weights[k]))
            total = term if total is None else total + term
    return total, per_stage


class Trainer:
    def __init__(self, model: NestedViT, transitions: List[FusionConfig], cfg: TrainConfig,
                 seed: int = 0, total_steps: Optional[int] = None):
        n = model.config.num_stages
        if cfg.strategy != "joint" and n < 3:
            raise ConfigError(f"strategy {cfg.strategy!r} needs at least 3 stages, got {n}")
        self.model = model
        self.transitions = transitions
        self.cfg = cfg
        self.weights = list(cfg.loss_weights) if cfg.loss_weights is not None else model.config.loss_weights
        if len(self.weights) != n:
            raise ConfigError(f"{len(self.weights)} loss weights for {n} stages")
        self.named = {f"model/{k}": p for k, p in model.params.items()}
        for i, t in enumerate(transitions):
            for k, p in t.parameters().items():
                self.named[f"transitions/{i}/{k}"] = p
        self.optimizer = make_optimizer(cfg, self.named)
        self.rng = np.random.default_rng([seed, 3])
        self.step_count = 0
        self.total_steps = total_steps

    # -- helpers -----------------------------------------------------------------
    def lr(self) -> float:
        total = self.total_steps or 1
        return learning_rate(self.cfg.learning_rate, self.cfg.schedule, self.step_count, total)

    def sample_stages(self) -> List[int]:
        n = self.model.config.num_stages
        if self.cfg.strategy == "joint":
            return list(range(n))
        if self.cfg.strategy == "sandwich":
            middle = int(self.rng.integers(1, n - 1))
            return [0, middle, n - 1]
        return [int(self.rng.integers(0, n))]

    def regions(self, active_stage: int) -> Dict[str, tuple]:
        out = {f"model/{k}": self.model.region(k, active_stage) for k in self.model.params}
        for i, t in enumerate(self.transitions):
            if t.to_stage <= active_stage:
                for k in t.parameters():
                    out[f"transitions/{i}/{k}"] = None
        return out

    def _clip(self, regions):
        if self.cfg.grad_clip is None:
            return
        sq = 0.0
        for name, region in regions.items():
            g = self.named[name].grad
            if g is not None:
                part = g if region is None else g[region]
                sq += float(np.square(part, dtype=np.float64).sum())
        norm = math.sqrt(sq)
        if norm > self.cfg.grad_clip:
            scale = self.cfg.grad_clip / (norm + 1e-6)
            for name in regions:
                p = self.named[name]
                if p.grad is not None:
                    p.grad = (p.grad * scale).astype(p.dtype)

    # -- steps -------------------------------------------------------------------
    def _step(self, images, labels, stages: List[int]) -> Dict[int, float]:
        labels = np.asarray(labels, np.int64)
        self.optimizer.zero_grad()
        deepest = max(stages)
        outputs = run_chain(self.model, self.transitions, images, deepest)
        total, per_stage = joint_loss(outputs, labels, self.weights, stages)
        losses = {}
        for k, ce in per_stage.items():
            value = ce.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(k, self.step_count, value)
            losses[k] = value
        contributing = [k for k in stages if self.weights[k] > 0]
        if total is not None:
            total.backward()
            regions = self.regions(max(contributing))
            self._clip(regions)
            self.optimizer.step(self.lr(), regions)
        self.step_count += 1
        return losses

    def train_step(self, images, labels) -> List[float]:
        """Joint step over every stage; returns the per-stage losses."""
        n = self.model.config.num_stages
        losses = self._step(images, labels, list(range(n)))
        return [losses[k] for k in range(n)]

    def train_step_sampled(self, images, labels) -> Dict[int, float]:
        """Sandwich or stochastic step; returns losses of the visited stages."""
        if self.cfg.strategy == "joint":
            raise ConfigError("train_step_sampled needs strategy 'sandwich' or 'stochastic'")
        return self._step(images, labels, self.sample_stages())

    def step(self, images, labels) -> Dict[int, float]:
        if self.cfg.strategy == "joint":
            return dict(enumerate(self.train_step(images, labels)))
        return self.train_step_sampled(images, labels)

    def alphas(self) -> List[float]:
        return [float(t.alpha.data) for t in self.transitions]


def stage_accuracies(model, transitions, images, labels, batch_size=256) -> List[float]:
    _, preds = forward_all_stages(images, model, transitions, batch_size)
    return [float((preds[:, k] == labels).mean()) for k in range(preds.shape[1])]


def fit(trainer: Trainer, dataset, seed: int, total_steps: int, metrics_path=None,
        checkpoint_dir=None, checkpoint_every: Optional[int] = None,
        save: Optional[Callable] = None) -> List[Dict[int, float]]:
    """Train from ``trainer.step_count`` up to ``total_steps``.

    Batch order is a pure function of (seed, epoch), so a resumed run sees
    exactly the batches the uninterrupted run would have seen.
    """
    bs = trainer.cfg.batch_size
    spe = dataset.steps_per_epoch(bs)
    trainer.total_steps = total_steps
    history = []
    log_fh = open(metrics_path, "a") if metrics_path else None
    cached_epoch, batches = None, None
    try:
        while trainer.step_count < total_steps:
            step = trainer.step_count
            epoch, index = divmod(step, spe)
            if epoch != cached_epoch:
                batches = list(dataset.batches(bs, seed, epoch))
                cached_epoch = epoch
            images, labels = batches[index]
            lr = trainer.lr()
            losses = trainer.step(images, labels)
            history.append(losses)
            if log_fh:
                record = {
                    "kind": "step",
                    "step": step + 1,
                    "epoch": epoch,
                    "lr": lr,
                    "losses": {str(k): v for k, v in sorted(losses.items())},
                    "alpha": trainer.alphas(),
                }
                log_fh.write(json.dumps(record) + "\n")
            if (step + 1) % spe == 0 or step + 1 == total_steps:
                accs = stage_accuracies(trainer.model, trainer.transitions,
                                        dataset.val_images, dataset.val_labels)
                log.info("step %d epoch %d val acc %s", step + 1, epoch, accs)
                if log_fh:
                    log_fh.write(json.dumps({"kind": "epoch", "step": step + 1, "epoch": epoch,
                                             "val_accuracy": accs}) + "\n")
            if save and checkpoint_every and (step + 1) % checkpoint_every == 0:
                save(Path(checkpoint_dir) / f"step_{step + 1:06d}")
    finally:
        if log_fh:
            log_fh.close()
    return history
