import numpy as np


def shannon_entropy(probs) -> np.ndarray:
    """Natural-log entropy along the last axis, with ``0 * log 0 = 0``."""
    p = np.asarray(probs, dtype=np.float64)
    logs = np.log(np.where(p > 0, p, 1.0))
    return 0.0 - (p * logs).sum(axis=-1)


def softmax64(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def entropy_from_logits(logits) -> np.ndarray:
    return shannon_entropy(softmax64(logits))
