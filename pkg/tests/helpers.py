"""Independent oracles shared by the test modules."""

import contextlib

import numpy as np

from nestedvit.config import ModelConfig, StageSpec

FD_STEP = 1e-3
REL_TOL = 1e-3
# denominators below this are treated as this, so coordinates whose true
# gradient is ~0 are judged on absolute error instead
REL_FLOOR = 1e-4


def toy_config(heads=(2, 4), head_dim=4, num_layers=1, image_size=8, patch_size=4,
               num_classes=3, in_channels=3, weights=None) -> ModelConfig:
    stages = [StageSpec(heads=h, loss_weight=None if weights is None else w)
              for h, w in zip(heads, weights or [None] * len(heads))]
    return ModelConfig(image_size=image_size, patch_size=patch_size, in_channels=in_channels,
                       num_layers=num_layers, head_dim=head_dim, num_classes=num_classes,
                       stages=stages)


@contextlib.contextmanager
def float64_params(tensors):
    """Temporarily promote tensors to float64 so the forward runs in 64-bit."""
    saved = [t.data for t in tensors]
    for t in tensors:
        t.data = t.data.astype(np.float64)
    try:
        yield
    finally:
        for t, d in zip(tensors, saved):
            t.data = d


def central_difference(loss_fn, tensors, target, coords, h=FD_STEP):
    """Central finite differences of ``loss_fn()`` w.r.t. ``target`` at ``coords``, in float64."""
    out = []
    with float64_params(tensors):
        for c in coords:
            orig = target.data[c]
            target.data[c] = orig + h
            up = float(loss_fn())
            target.data[c] = orig - h
            down = float(loss_fn())
            target.data[c] = orig
            out.append((up - down) / (2 * h))
    return np.array(out)


def relative_errors(analytic, numeric, floor=REL_FLOOR):
    analytic = np.asarray(analytic, np.float64)
    numeric = np.asarray(numeric, np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def sample_coords(shape, count, rng):
    if len(shape) == 0:
        return [()]
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(count, size), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def gradcheck(loss_fn, tensors, targets, count=20, seed=0):
    """Compare analytic float32 gradients with float64 central differences.

    ``loss_fn`` builds and returns the scalar loss Tensor from the current
    data of ``tensors``.  Returns the worst relative error per target.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    worst = {}
    for name, target in targets.items():
        grad = np.zeros_like(target.data) if target.grad is None else target.grad
        coords = sample_coords(target.shape, count, rng)
        analytic = np.array([grad[c] for c in coords])
        numeric = central_difference(lambda: loss_fn().data, tensors, target, coords)
        worst[name] = float(relative_errors(analytic, numeric).max())
    return worst


# criterion number -> (title, passed, detail); filled by test_acceptance and
# printed by the terminal-summary hook in conftest
ACCEPTANCE = {}


@contextlib.contextmanager
def criterion(number, title):
    """Record the outcome of one acceptance criterion, re-raising failures."""
    details = []
    try:
        yield details
    except BaseException as exc:
        details.append(f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
        ACCEPTANCE[number] = (title, False, "; ".join(details))
        raise
    ACCEPTANCE[number] = (title, True, "; ".join(details))
