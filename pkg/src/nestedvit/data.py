"""Datasets: IDX ubyte files and a seeded difficulty-graded synthetic task."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

from .errors import ConfigError, FormatError, InputError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
_UBYTE = 0x08


@dataclass
class Dataset:
    """In-memory train/val split with images as float32 (N, C, H, W)."""

    source: str
    num_classes: int
    train_images: np.ndarray
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    train_hard: Optional[np.ndarray] = None
    val_hard: Optional[np.ndarray] = None
    difficulty_mix: Optional[float] = None

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.train_images.shape[1:])

    def batches(self, batch_size: int, seed: int, epoch: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """Shuffled training batches; the order is a pure function of (seed, epoch)."""
        order = np.random.default_rng([seed, epoch]).permutation(len(self.train_labels))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            yield self.train_images[idx], self.train_labels[idx]

    def steps_per_epoch(self, batch_size: int) -> int:
        return -(-len(self.train_labels) // batch_size)


# -- IDX ---------------------------------------------------------------------------

def read_idx(path) -> np.ndarray:
    """Parse one IDX ubyte file into a uint8 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header", offset=len(raw))
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0:
        raise FormatError(f"{path}: bad magic {raw[:4].hex()}", offset=0)
    if dtype_code != _UBYTE:
        raise FormatError(f"{path}: unsupported element type 0x{dtype_code:02x}", offset=2)
    if ndim == 0:
        raise FormatError(f"{path}: zero dimensions", offset=3)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension list", offset=len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header < expected:
        raise FormatError(
            f"{path}: truncated payload, expected {expected} bytes", offset=len(raw)
        )
    if len(raw) - header > expected:
        raise FormatError(f"{path}: {len(raw) - header - expected} trailing bytes", offset=header + expected)
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray):
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, _UBYTE, array.ndim))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(array.tobytes())


def _magic(path) -> int:
    with open(path, "rb") as fh:
        head = fh.read(4)
    if len(head) < 4:
        raise FormatError(f"{path}: file too short for an IDX header", offset=len(head))
    return struct.unpack(">I", head)[0]


def _to_model_images(raw: np.ndarray, image_size: Optional[int], in_channels: int) -> np.ndarray:
    if raw.ndim == 3:
        raw = raw[:, None]
    elif raw.ndim != 4:
        raise FormatError(f"image tensor must be 3-D or 4-D, got {raw.ndim}-D", offset=3)
    x = raw.astype(np.float32) / 255.0
    if image_size is not None and x.shape[-2:] != (image_size, image_size):
        rows = (np.arange(image_size) * x.shape[-2]) // image_size
        cols = (np.arange(image_size) * x.shape[-1]) // image_size
        x = x[:, :, rows][:, :, :, cols]
    if x.shape[1] != in_channels:
        if x.shape[1] != 1:
            raise InputError(f"cannot map {x.shape[1]} channels to {in_channels}")
        x = np.repeat(x, in_channels, axis=1)
    return np.ascontiguousarray(x)


def _find_pairs(dirpath: Path):
    files = sorted(p for p in dirpath.iterdir() if p.is_file())
    images = [p for p in files if _magic(p) == IMAGES_MAGIC]
    labels = [p for p in files if _magic(p) == LABELS_MAGIC]
    pairs = {}
    for img in images:
        prefix = img.name.split("-")[0]
        match = [lab for lab in labels if lab.name.split("-")[0] == prefix]
        if match:
            pairs[prefix] = (img, match[0])
    return pairs


def load_idx(dirpath, num_classes: int = 10, image_size: Optional[int] = None, in_channels: int = 1,
             val_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Load ``<prefix>-images-idx3-ubyte`` / ``<prefix>-labels-idx1-ubyte`` pairs.

    A ``train`` pair plus a ``t10k`` or ``test`` pair become the train and
    validation splits; a single pair is split by ``val_fraction`` under
    ``seed``.  Pixels are scaled to [0, 1].
    """
    dirpath = Path(dirpath)
    if not dirpath.is_dir():
        raise InputError(f"{dirpath} is not a directory")
    pairs = _find_pairs(dirpath)
    if not pairs:
        raise InputError(f"no IDX image/label pairs in {dirpath}")

    def load(pair):
        x = read_idx(pair[0])
        y = read_idx(pair[1])
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise InputError(f"{pair[1]}: {y.shape[0]} labels for {x.shape[0]} images")
        bad = np.flatnonzero(y >= num_classes)
        if bad.size:
            raise InputError(
                f"{pair[1]}: label {int(y[bad[0]])} at index {int(bad[0])} outside [0, {num_classes})"
            )
        return _to_model_images(x, image_size, in_channels), y.astype(np.int64)

    test_key = next((k for k in ("t10k", "test", "val") if k in pairs), None)
    if "train" in pairs and test_key:
        tx, ty = load(pairs["train"])
        vx, vy = load(pairs[test_key])
    else:
        x, y = load(pairs[sorted(pairs)[0]])
        order = np.random.default_rng(seed).permutation(len(y))
        n_val = max(1, int(round(val_fraction * len(y)))) if len(y) > 1 else 0
        val, train = order[:n_val], order[n_val:]
        tx, ty, vx, vy = x[train], y[train], x[val], y[val]
    return Dataset("idx", num_classes, tx, ty, vx, vy)


# -- synthetic ---------------------------------------------------------------------

EASY_SIGNAL, EASY_NOISE = 1.0, 0.6
HARD_SIGNAL, HARD_DISTRACTOR, HARD_NOISE = 0.55, 0.45, 1.0


def class_templates(num_classes: int, image_size: int, in_channels: int, seed: int) -> np.ndarray:
    """Smooth random unit-variance patterns, one per class."""
    rng = np.random.default_rng([seed, 7])
    coarse = 4
    low = rng.normal(size=(num_classes, in_channels, coarse, coarse))
    idx = (np.arange(image_size) * coarse) // image_size
    t = low[:, :, idx][:, :, :, idx]
    t = t - t.mean(axis=(1, 2, 3), keepdims=True)
    return (t / t.std(axis=(1, 2, 3), keepdims=True)).astype(np.float32)


def _sample(templates, count, mix, rng):
    C = templates.shape[0]
    labels = rng.integers(0, C, size=count)
    hard = np.zeros(count, bool)
    hard[rng.permutation(count)[: int(round(mix * count))]] = True
    distractor = (labels + rng.integers(1, C, size=count)) % C
    noise = rng.normal(size=(count,) + templates.shape[1:]).astype(np.float32)
    signal = np.where(hard, HARD_SIGNAL, EASY_SIGNAL)[:, None, None, None]
    dist = np.where(hard, HARD_DISTRACTOR, 0.0)[:, None, None, None]
    sigma = np.where(hard, HARD_NOISE, EASY_NOISE)[:, None, None, None]
    x = signal * templates[labels] + dist * templates[distractor] + sigma * noise
    return x.astype(np.float32), labels.astype(np.int64), hard


def make_synthetic(num_classes: int, image_size: int, in_channels: int = 3, num_train: int = 512,
                   num_val: int = 256, difficulty_mix: float = 0.5, seed: int = 0,
                   template_seed: Optional[int] = None) -> Dataset:
    """Difficulty-graded classification task; a pure function of its arguments.

    Easy samples are the class template at high signal-to-noise.  Hard samples
    carry a weaker template, a different class's template as distractor, and
    stronger noise.  ``difficulty_mix`` is the exact fraction of hard samples
    in each split.  Templates depend on ``template_seed`` (default ``seed``)
    so datasets with different mixes can share one task.
    """
    if not 0.0 <= difficulty_mix <= 1.0:
        raise ConfigError(f"difficulty_mix must lie in [0, 1], got {difficulty_mix}")
    templates = class_templates(num_classes, image_size, in_channels,
                                seed if template_seed is None else template_seed)
    rng = np.random.default_rng([seed, 11])
    tx, ty, th = _sample(templates, num_train, difficulty_mix, rng)
    vx, vy, vh = _sample(templates, num_val, difficulty_mix, rng)
    return Dataset("synthetic", num_classes, tx, ty, vx, vy, th, vh, difficulty_mix)


def load_dataset(run_config) -> Dataset:
    """Build the dataset described by a :class:`~nestedvit.config.RunConfig`."""
    m, d = run_config.model, run_config.data
    seed = run_config.seed if d.seed is None else d.seed
    if d.source == "synthetic":
        return make_synthetic(m.num_classes, m.image_size, m.in_channels, d.num_train, d.num_val,
                              d.difficulty_mix, seed)
    return load_idx(d.path, m.num_classes, m.image_size, m.in_channels, d.val_fraction, seed)
