"""Dense float tensors with define-by-run reverse-mode differentiation.

Storage is float32 by default; reductions (matmul inner products, softmax
sums, layernorm statistics, cross-entropy) accumulate in float64 and are
cast back to the promoted operand dtype.  Every differentiable result records the
op that produced it with a global insertion sequence number; ``backward``
replays the reachable nodes in exact reverse insertion order.

GELU is the exact-erf form ``0.5 * x * (1 + erf(x / sqrt(2)))``.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, InputError, ShapeError, UsageError

_SEQ = itertools.count()
_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.float32
_MAC_COUNTERS: list = []

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def default_dtype(dtype):
    """Change the dtype used for tensors built from non-float data."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


class MacCounter:
    def __init__(self):
        self.total = 0
        self.calls = []

    def add(self, batch: int, m: int, k: int, n: int):
        macs = batch * m * k * n
        self.total += macs
        self.calls.append((batch, m, k, n))


@contextlib.contextmanager
def count_macs():
    """Instrument every ``matmul`` executed in the block.

    Yields a :class:`MacCounter` whose ``total`` is the sum of
    ``batch * m * k * n`` over all matrix products.
    """
    counter = MacCounter()
    _MAC_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _MAC_COUNTERS.remove(counter)


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(_DEFAULT_DTYPE)


class Tensor:
    """A dense n-dimensional float array with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._seq = -1
        self.name = name

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.shape[0]

    # -- autodiff -------------------------------------------------------------
    def backward(self, grad=None):
        """Populate ``.grad`` on every tensor reachable from this scalar.

        Gradients accumulate: calling twice without zeroing adds.
        """
        if self.size != 1:
            raise UsageError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that does not require grad")
        seed = np.ones_like(self.data) if grad is None else _as_array(grad, self.dtype)

        nodes = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._backward is None or id(t) in nodes:
                continue
            nodes[id(t)] = t
            stack.extend(t._parents)
        order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)

        pending = {id(self): seed}
        if self._backward is None:
            _accumulate(self, seed)
            return
        for node in order:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            _accumulate(node, g)
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    _accumulate(parent, pg)
                elif id(parent) in pending:
                    pending[id(parent)] = pending[id(parent)] + pg
                else:
                    pending[id(parent)] = pg

    # -- operator sugar --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _accumulate(t: Tensor, g: np.ndarray):
    g = np.asarray(g, dtype=t.dtype)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._seq = next(_SEQ)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out.astype(np.result_type(a.dtype, b.dtype), copy=False), (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out.astype(np.result_type(a.dtype, b.dtype), copy=False), (a, b), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU."""
    xd = x.data.astype(np.float64)
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    out = (xd * cdf).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return ((cdf + xd * pdf) * g).astype(x.dtype),

    return _result(out, (x,), backward)


# -- shape ops -------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if not axes else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (slice, int)) for p in parts)
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=a.dtype)

    def backward(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _result(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


# -- linear algebra ----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``(..., m, k) @ (..., k, n)``.

    Inner products accumulate in float64.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        batch_shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}") from None
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    out = np.matmul(a64, b64).astype(np.result_type(a.dtype, b.dtype))
    if _MAC_COUNTERS:
        batch = int(np.prod(batch_shape)) if batch_shape else 1
        for counter in _MAC_COUNTERS:
            counter.add(batch, a.shape[-2], a.shape[-1], b.shape[-1])

    def backward(g):
        g64 = g.astype(np.float64)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g64, np.swapaxes(b64, -1, -2)), a.shape).astype(a.dtype)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a64, -1, -2), g64), b.shape).astype(b.dtype)
        return ga, gb

    return _result(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out as (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# -- normalisation and losses ---------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    xd = x.data.astype(np.float64)
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y64 = e / e.sum(axis=axis, keepdims=True)
    y = y64.astype(x.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        inner = (g64 * y64).sum(axis=axis, keepdims=True)
        return ((g64 - inner) * y64).astype(x.dtype),

    return _result(y, (x,), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ConfigError(f"layernorm eps must be positive, got {eps}")
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(
            f"layernorm affine shapes {gamma.shape}/{beta.shape} do not match width {width}"
        )
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    gam = gamma.data.astype(np.float64)
    out = (xhat * gam + beta.data).astype(np.result_type(x.dtype, gamma.dtype, beta.dtype))

    def backward(g):
        g64 = g.astype(np.float64)
        lead = tuple(range(g.ndim - 1))
        ggamma = (g64 * xhat).sum(axis=lead).astype(gamma.dtype)
        gbeta = g64.sum(axis=lead).astype(beta.dtype)
        gx = None
        if x.requires_grad:
            gxhat = g64 * gam
            gx = rstd * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
            gx = gx.astype(x.dtype)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B, C) logits, got {logits.shape}")
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {batch}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError(f"labels must be integers, got {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise InputError(f"label out of range [0, {classes}): {labels.min()}..{labels.max()}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(batch)
    loss = np.mean(logsum - z[rows, labels])

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / batch)).astype(logits.dtype),

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# -- helpers ----------------------------------------------------------------------

def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float32), requires_grad=True, name=name)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def all_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in tensors)
