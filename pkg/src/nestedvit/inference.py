"""Entropy-gated progressive inference.

After stage ``k`` a sample halts iff its softmax entropy (nats) is strictly
below the threshold for that transition; the final stage always emits.
Halting is decided per sample and continuing samples are regrouped into a
smaller batch before the next, wider stage runs.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import cost as cost_model
from .errors import InputError, ThresholdLookupError
from .model import NestedViT, count_params
from .recycling import FusionConfig
from .tensor import Tensor, no_grad

TauLike = Union[float, Sequence[float]]


@dataclass
class HaltPolicy:
    """Entropy threshold shared by all transitions, or one per transition."""

    tau: TauLike = 1.0

    def thresholds(self, num_stages: int) -> List[float]:
        if isinstance(self.tau, (int, float)):
            taus = [float(self.tau)] * (num_stages - 1)
        else:
            taus = [float(t) for t in self.tau]
            if len(taus) != num_stages - 1:
                raise InputError(f"need {num_stages - 1} thresholds, got {len(taus)}")
        if any(t < 0 or math.isnan(t) for t in taus):
            raise InputError(f"thresholds must be >= 0, got {taus}")
        return taus


def halting_stage(entropies: np.ndarray, taus: Sequence[float]) -> np.ndarray:
    """Stage index at which each sample halts, given all stage entropies (N, n)."""
    entropies = np.asarray(entropies)
    n = entropies.shape[1]
    halted = np.full(entropies.shape[0], n - 1, dtype=np.int64)
    undecided = np.ones(entropies.shape[0], dtype=bool)
    for k, tau in enumerate(taus[: n - 1]):
        stop = undecided & (entropies[:, k] < tau)
        halted[stop] = k
        undecided &= ~stop
    return halted


@dataclass
class ProgressiveResult:
    predictions: np.ndarray
    halted_stage: np.ndarray
    entropies: List[List[float]]
    stage_predictions: List[List[int]]


def _stage_chain(model, transitions, images, active_rule):
    """Run stages in order, regrouping survivors between stages.

    ``active_rule(k, entropy)`` returns the mask of samples that continue.
    Yields ``(k, indices, output)`` for each executed stage.
    """
    n = model.config.num_stages
    active = np.arange(images.shape[0])
    z_prev = None
    for k in range(n):
        view = model.slice_view(k)
        fresh = model.embed(images[active], k, view)
        x = fresh if k == 0 else transitions[k - 1].fuse(z_prev, fresh)
        out = model.forward_stage(x, k, view)
        yield k, active, out
        if k == n - 1:
            return
        keep = active_rule(k, out.entropy)
        if not keep.any():
            return
        active = active[keep]
        z_prev = out.tokens if keep.all() else out.tokens[np.flatnonzero(keep)]


def infer_progressive(images, model: NestedViT, transitions: List[FusionConfig], policy: HaltPolicy,
                      batch_size: int = 256) -> ProgressiveResult:
    """Per-sample early-exit inference over a batch of images."""
    images = np.asarray(images.data if isinstance(images, Tensor) else images, np.float32)
    n = model.config.num_stages
    taus = policy.thresholds(n)
    N = images.shape[0]
    preds = np.zeros(N, np.int64)
    halted = np.zeros(N, np.int64)
    ents: List[List[float]] = [[] for _ in range(N)]
    stage_preds: List[List[int]] = [[] for _ in range(N)]
    with no_grad():
        for start in range(0, N, batch_size):
            chunk = images[start:start + batch_size]
            for k, idx, out in _stage_chain(model, transitions, chunk, lambda k, h: ~(h < taus[k])):
                p = out.logits.data.argmax(axis=1)
                for j, i in enumerate(idx + start):
                    ents[i].append(float(out.entropy[j]))
                    stage_preds[i].append(int(p[j]))
                preds[idx + start] = p
                halted[idx + start] = k
    return ProgressiveResult(preds, halted, ents, stage_preds)


def forward_all_stages(images, model: NestedViT, transitions, batch_size: int = 256):
    """Force every sample through every stage; returns (entropies, predictions), both (N, n)."""
    images = np.asarray(images, np.float32)
    n = model.config.num_stages
    N = images.shape[0]
    ents = np.zeros((N, n), np.float64)
    preds = np.zeros((N, n), np.int64)
    with no_grad():
        for start in range(0, N, batch_size):
            chunk = images[start:start + batch_size]
            for k, idx, out in _stage_chain(model, transitions, chunk, lambda k, h: np.ones(h.shape, bool)):
                ents[start + idx, k] = out.entropy
                preds[start + idx, k] = out.logits.data.argmax(axis=1)
    return ents, preds


def _tau_key(tau: float) -> str:
    return "inf" if math.isinf(tau) else repr(float(tau))


@dataclass
class RoutingReport:
    taus: List[float]
    entropies: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray
    path_gmacs: List[float]
    params_m: float
    rows: List[dict] = field(default_factory=list)

    @property
    def num_stages(self) -> int:
        return self.entropies.shape[1]

    def has_tau(self, tau: float) -> bool:
        return any(t == tau for t in self.taus)

    def _require(self, tau):
        if not self.has_tau(tau):
            raise ThresholdLookupError(f"tau {tau} not in report (have {self.taus})")

    def halted_stages(self, tau: TauLike) -> np.ndarray:
        taus = HaltPolicy(tau).thresholds(self.num_stages)
        return halting_stage(self.entropies, taus)

    def final_predictions(self, tau: TauLike) -> np.ndarray:
        halted = self.halted_stages(tau)
        return self.predictions[np.arange(len(halted)), halted]

    def row(self, tau: float) -> dict:
        self._require(tau)
        return next(r for r in self.rows if r["tau"] == tau)

    def trace(self, tau: float, ids=None) -> List[dict]:
        halted = self.halted_stages(tau)
        ids = range(len(halted)) if ids is None else ids
        records = []
        for i, sid in enumerate(ids):
            k = int(halted[i])
            records.append({
                "id": int(sid),
                "entropies": [float(e) for e in self.entropies[i, : k + 1]],
                "halted_stage": k,
                "pred": int(self.predictions[i, k]),
                "label": int(self.labels[i]),
                "stage_preds": [int(p) for p in self.predictions[i, : k + 1]],
            })
        return records

    def to_csv(self) -> str:
        buf = io.StringIO()
        n = self.num_stages
        cols = ["tau", "accuracy", "mean_gmacs"] + [f"stage{k + 1}_call_ratio" for k in range(n)] + ["params_m"]
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for r in self.rows:
            writer.writerow(
                [_tau_key(r["tau"]), f"{r['accuracy']:.6f}", f"{r['mean_gmacs']:.6f}"]
                + [f"{x:.6f}" for x in r["stage_call_ratios"]]
                + [f"{self.params_m:.6f}"]
            )
        return buf.getvalue()

    def to_dict(self) -> dict:
        rows = []
        for r in self.rows:
            r = dict(r)
            r["tau"] = _tau_key(r["tau"]) if math.isinf(r["tau"]) else r["tau"]
            rows.append(r)
        return {
            "num_samples": int(self.labels.size),
            "num_stages": self.num_stages,
            "path_gmacs": self.path_gmacs,
            "params_m": self.params_m,
            "rows": rows,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _row(report: RoutingReport, tau: float) -> dict:
    n = report.num_stages
    N = report.labels.size
    halted = report.halted_stages(tau)
    preds = report.predictions[np.arange(N), halted]
    correct = preds == report.labels
    entered = [int((halted >= k).sum()) for k in range(n)]
    halted_acc = []
    for k in range(n):
        mask = halted == k
        halted_acc.append(float(correct[mask].mean()) if mask.any() else None)
    return {
        "tau": tau,
        "accuracy": float(correct.mean()),
        "mean_gmacs": cost_model.mean_path_gmacs(halted, report.path_gmacs),
        "stage_call_ratios": [e / N for e in entered],
        "stage_accuracy_halted": halted_acc,
    }


def sweep(images, labels, model: NestedViT, transitions, tau_list: Sequence[float],
          batch_size: int = 256) -> RoutingReport:
    """Evaluate many thresholds from one forced full pass.

    Entropies do not depend on the threshold, so every stage runs once per
    sample and the halting decisions are replayed per threshold.
    """
    labels = np.asarray(labels, np.int64)
    if labels.size == 0:
        raise InputError("sweep needs a non-empty dataset")
    taus = [float(t) for t in tau_list]
    if not taus:
        raise InputError("tau_list must be non-empty")
    if sorted(taus) != taus:
        raise InputError(f"tau_list must be sorted ascending, got {taus}")
    ents, preds = forward_all_stages(images, model, transitions, batch_size)
    cfg = model.config
    strategies = [t.strategy for t in transitions]
    report = RoutingReport(
        taus=taus,
        entropies=ents,
        predictions=preds,
        labels=labels,
        path_gmacs=cost_model.halting_path_gmacs(cfg, strategies),
        params_m=(count_params(cfg) + sum(t.num_params() for t in transitions)) / 1e6,
    )
    report.rows = [_row(report, t) for t in taus]
    return report


def load_distribution(report: RoutingReport, tau: float) -> dict:
    """Per-stage usage shares and correct/incorrect split among samples halting there."""
    report._require(tau)
    halted = report.halted_stages(tau)
    correct = report.final_predictions(tau) == report.labels
    return _distribution(halted, correct, report.num_stages)


def _distribution(halted, correct, num_stages) -> dict:
    N = len(halted)
    stages = []
    shares = []
    for k in range(num_stages):
        mask = halted == k
        count = int(mask.sum())
        ok = int(correct[mask].sum())
        shares.append(Fraction(count, N))
        stages.append({
            "stage": k,
            "count": count,
            "share": count / N,
            "correct": ok,
            "incorrect": count - ok,
            "accuracy": ok / count if count else None,
        })
    assert sum(shares) == 1
    return {"num_samples": N, "stages": stages}


BUCKETS = ("correct_correct", "correct_wrong", "wrong_correct", "wrong_wrong")


@dataclass
class DynamicsReport:
    """Correctness transitions between consecutive rounds, one dict per transition."""

    transitions: List[Dict[str, int]]
    num_samples: int

    def to_dict(self) -> dict:
        return {"num_samples": self.num_samples, "transitions": self.transitions}


def dynamics_from_predictions(stage_preds: np.ndarray, labels: np.ndarray) -> DynamicsReport:
    stage_preds = np.asarray(stage_preds)
    labels = np.asarray(labels)
    ok = stage_preds == labels[:, None]
    out = []
    for k in range(stage_preds.shape[1] - 1):
        a, b = ok[:, k], ok[:, k + 1]
        out.append({
            "from_stage": k,
            "to_stage": k + 1,
            "correct_correct": int((a & b).sum()),
            "correct_wrong": int((a & ~b).sum()),
            "wrong_correct": int((~a & b).sum()),
            "wrong_wrong": int((~a & ~b).sum()),
        })
    return DynamicsReport(out, int(labels.size))


def prediction_dynamics(images, labels, model: NestedViT, transitions, batch_size: int = 256) -> DynamicsReport:
    """Force all samples through every round and bucket consecutive-round correctness."""
    if model.config.num_stages < 2:
        raise InputError("prediction dynamics needs at least two stages")
    _, preds = forward_all_stages(images, model, transitions, batch_size)
    return dynamics_from_predictions(preds, np.asarray(labels))


def summarize_trace(records: List[dict], num_stages: Optional[int] = None) -> dict:
    """Load distribution and (where available) prediction dynamics from trace records."""
    if not records:
        raise InputError("empty trace")
    n = num_stages or max(r["halted_stage"] for r in records) + 1
    halted = np.array([r["halted_stage"] for r in records])
    correct = np.array([r["pred"] == r["label"] for r in records])
    summary = {"load_distribution": _distribution(halted, correct, n)}
    full = [r for r in records if len(r.get("stage_preds", [])) == n]
    if n >= 2 and full:
        preds = np.array([r["stage_preds"] for r in full])
        labels = np.array([r["label"] for r in full])
        summary["prediction_dynamics"] = dynamics_from_predictions(preds, labels).to_dict()
    return summary
