"""Checkpoint directory: ``manifest.json`` + ``tensors.bin``.

The manifest holds the resolved run config, a tensor directory
(name -> shape, dtype, byte offset, byte length, sha256) and the training
state (step counter, epoch, optimizer step, sampling RNG state).  The blob
is the concatenation of every tensor as little-endian float32 in directory
order.  Namespaces: ``model/``, ``transitions/<i>/``, ``optimizer/<slot>/``.
Output is deterministic, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .errors import CorruptionError

FORMAT = "nestedvit-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


def _collect(model, transitions, trainer=None) -> Dict[str, np.ndarray]:
    tensors = {f"model/{k}": p.data for k, p in model.params.items()}
    for i, t in enumerate(transitions):
        for k, p in t.parameters().items():
            tensors[f"transitions/{i}/{k}"] = p.data
    if trainer is not None:
        for k, arr in trainer.optimizer.state_tensors().items():
            slot, name = k.split("/", 1)
            tensors[f"optimizer/{slot}/{name}"] = arr
    return tensors


def save_checkpoint(path, model, transitions, trainer=None, config: Optional[dict] = None,
                    epoch: Optional[int] = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = _collect(model, transitions, trainer)
    directory = {}
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory[name] = {
            "shape": list(arr.shape),
            "dtype": "float32",
            "offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        }
        chunks.append(raw)
        offset += len(raw)
    state = {"epoch": epoch}
    if trainer is not None:
        state.update({
            "step": trainer.step_count,
            "optimizer": trainer.optimizer.kind,
            "optimizer_t": trainer.optimizer.t,
            "rng": trainer.rng.bit_generator.state,
        })
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "config": config,
        "tensor_order": list(directory),
        "tensors": directory,
        "state": state,
    }
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_checkpoint(path):
    """Parse and verify a checkpoint; returns ``(manifest, {name: array})``."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError as exc:
        raise CorruptionError(f"missing checkpoint file: {exc.filename}") from None
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"unreadable manifest: {exc}") from None
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CorruptionError(f"unsupported checkpoint format {manifest.get('format')!r}")
    tensors = {}
    expected_offset = 0
    for name in manifest["tensor_order"]:
        entry = manifest["tensors"][name]
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if entry["nbytes"] != nbytes:
            raise CorruptionError(f"{name}: shape {shape} implies {nbytes} bytes, manifest says {entry['nbytes']}")
        if entry["offset"] != expected_offset:
            raise CorruptionError(f"{name}: offset {entry['offset']} != expected {expected_offset}")
        raw = blob[entry["offset"]: entry["offset"] + nbytes]
        if len(raw) != nbytes:
            raise CorruptionError(f"{name}: blob truncated at offset {entry['offset']}")
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CorruptionError(f"{name}: digest mismatch")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        expected_offset += nbytes
    if expected_offset != len(blob):
        raise CorruptionError(f"blob has {len(blob) - expected_offset} unreferenced trailing bytes")
    return manifest, tensors


def load_checkpoint(path, model, transitions, trainer=None) -> dict:
    """Restore tensors (and trainer state when given) in place; returns the manifest."""
    manifest, tensors = read_checkpoint(path)
    targets = _collect(model, transitions, trainer)
    wanted = set(targets)
    present = set(tensors)
    if trainer is None:
        present = {n for n in present if not n.startswith("optimizer/")}
    if wanted != present:
        missing = sorted(wanted - present)[:3]
        extra = sorted(present - wanted)[:3]
        raise CorruptionError(f"tensor inventory mismatch (missing {missing}, unexpected {extra})")
    for name, dst in targets.items():
        src = tensors[name]
        if src.shape != dst.shape:
            raise CorruptionError(f"{name}: shape {src.shape} != model shape {dst.shape}")
        dst[...] = src
    if trainer is not None:
        state = manifest["state"]
        if state.get("optimizer") != trainer.optimizer.kind:
            raise CorruptionError(f"optimizer {state.get('optimizer')!r} != {trainer.optimizer.kind!r}")
        trainer.step_count = state["step"]
        trainer.optimizer.t = state["optimizer_t"]
        trainer.rng.bit_generator.state = state["rng"]
    return manifest
