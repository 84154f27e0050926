"""Region-restricted optimizers.

``step`` takes, per parameter name, the index region that the current loss
reached (or no entry to leave the parameter untouched).  Moments, weight
decay and updates are applied only inside that region, so the exclusive
channels of stages a step did not train stay bit-identical.
"""

from __future__ import annotations

import math
from typing import Dict, Optional

import numpy as np

from .tensor import Tensor

Region = Optional[tuple]


def _decays(name: str, p: Tensor) -> bool:
    return p.ndim >= 2


class Optimizer:
    kind = "base"
    slots: tuple = ()

    def __init__(self, params: Dict[str, Tensor], weight_decay: float = 0.0):
        self.params = params
        self.weight_decay = weight_decay
        self.t = 0
        self.state = {
            slot: {name: np.zeros_like(p.data) for name, p in params.items()} for slot in self.slots
        }

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float, regions: Dict[str, Region]):
        self.t += 1
        for name, region in regions.items():
            p = self.params[name]
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            r = (slice(None),) * p.ndim if region is None else region
            self._update(name, p, g, r, lr)

    def _update(self, name, p, g, r, lr):
        raise NotImplementedError

    def state_tensors(self) -> Dict[str, np.ndarray]:
        return {f"{slot}/{name}": arr for slot, table in self.state.items() for name, arr in table.items()}

    def load_state_tensors(self, tensors: Dict[str, np.ndarray], t: int):
        for key, arr in tensors.items():
            slot, name = key.split("/", 1)
            self.state[slot][name][...] = arr
        self.t = t


class SGDMomentum(Optimizer):
    kind = "sgd_momentum"
    slots = ("momentum",)

    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        super().__init__(params, weight_decay)
        self.momentum = momentum

    def _update(self, name, p, g, r, lr):
        grad = g[r].astype(np.float64)
        w = p.data[r].astype(np.float64)
        if self.weight_decay and _decays(name, p):
            grad = grad + self.weight_decay * w
        buf = self.state["momentum"][name]
        b = self.momentum * buf[r] + grad
        buf[r] = b
        p.data[r] = (w - lr * b).astype(p.dtype)


class AdamW(Optimizer):
    kind = "adamw"
    slots = ("exp_avg", "exp_avg_sq")

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        super().__init__(params, weight_decay)
        self.b1, self.b2 = betas
        self.eps = eps

    def _update(self, name, p, g, r, lr):
        grad = g[r].astype(np.float64)
        m_all, v_all = self.state["exp_avg"][name], self.state["exp_avg_sq"][name]
        m = self.b1 * m_all[r] + (1 - self.b1) * grad
        v = self.b2 * v_all[r] + (1 - self.b2) * grad * grad
        m_all[r], v_all[r] = m, v
        mhat = m / (1 - self.b1**self.t)
        vhat = v / (1 - self.b2**self.t)
        w = p.data[r].astype(np.float64)
        if self.weight_decay and _decays(name, p):
            w = w * (1 - lr * self.weight_decay)
        p.data[r] = (w - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)


def make_optimizer(cfg, params: Dict[str, Tensor]) -> Optimizer:
    if cfg.optimizer == "adamw":
        return AdamW(params, tuple(cfg.betas), weight_decay=cfg.weight_decay)
    return SGDMomentum(params, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def learning_rate(base: float, schedule: str, step: int, total: int) -> float:
    if schedule == "constant" or total <= 1:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))
