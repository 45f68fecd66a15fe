"""Reverse-mode automatic differentiation over numpy arrays.

Each differentiable op returns a new :class:`Tensor` that remembers its
parents, a closure mapping the output gradient to parent gradients, and a
monotonically increasing sequence number. The sequence numbers form the
tape: ``backward`` replays the reachable nodes in exactly the reverse of
their creation order.

Broadcasting is restricted to leading (batch) dimensions: a binary op
accepts operands whose shapes are equal or where one shape is a suffix of
the other. Anything else raises :class:`DimensionError`.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, UsageError

_FLOATS = (np.float32, np.float64)
_seq = itertools.count()
_grad_enabled = True

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOATS:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self) -> None:
        backward(self)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: scale(self, -1.0)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(x, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward() called on a tensor that is not on the tape")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- broadcasting helpers -------------------------------------------------

def _check_bcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{op}: shapes {sa} and {sb} differ beyond leading batch dims")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    a, b = as_tensor(a), as_tensor(b)
    if a.dtype != b.dtype:
        raise DimensionError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_bcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_bcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_bcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return _node(ad * bd, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    return _node(x.data * c, (x,), lambda g: (g * c,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    m = x.data > 0
    return _node(np.where(m, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * m,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    inner = GELU_C * (xd + GELU_K * (xd * xd * xd))
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_K * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)
    return _node(y, (x,), bw)


def dropout(x: Tensor, p: float, rng, training: bool = True) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or not training."""
    if not training or p <= 0.0:
        return x
    keep = 1.0 - p
    m = rng.bernoulli_keep(x.shape, keep, dtype=x.dtype) / x.dtype.type(keep)
    return _node(x.data * m, (x,), lambda g: (g * m,))


# -- shape ops ------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def expand(x: Tensor, lead: Sequence[int]) -> Tensor:
    """Prepend leading batch dimensions by repetition."""
    lead = tuple(lead)
    out = np.broadcast_to(x.data, lead + x.shape).copy()
    n = len(lead)
    return _node(out, (x,), lambda g: (g.sum(axis=tuple(range(n))) if n else g,))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    nd = xs[0].ndim
    ax = axis % nd
    for x in xs[1:]:
        if x.ndim != nd or any(x.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(f"concat: shapes {[t.shape for t in xs]} disagree off axis {axis}")
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _node(np.concatenate([x.data for x in xs], axis=ax), xs,
                 lambda g: tuple(np.split(g, bounds, axis=ax)))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    src_shape, dtype = x.shape, x.dtype
    basic = _is_basic(idx)

    def bw(g):
        out = np.zeros(src_shape, dtype=dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)
    return _node(x.data[idx], (x,), bw)


# -- reductions -----------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)
    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum_(x, axis, keepdims), 1.0 / n)


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[..., k, n]``; b may omit a's leading dims (shared weight)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    if a.dtype != b.dtype:
        raise DimensionError(f"matmul: dtypes {a.dtype} and {b.dtype} differ")
    la, lb = a.shape[:-2], b.shape[:-2]
    if la != lb and lb and la:
        short, long_ = (la, lb) if len(la) <= len(lb) else (lb, la)
        if long_[len(long_) - len(short):] != short:
            raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb
    return _node(ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``x[..., in]``, ``w[in, out]``, ``b[out]``."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x, w)
    if b is not None:
        y = add(y, b)
    return reshape(y, lead + (w.shape[1],)) if x.ndim != 2 else y


# -- normalisation / probability -----------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _node(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm: last dimension is empty")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    y = xhat * gd + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggamma, gbeta
    return _node(y, (x, gamma, beta), bw)


# -- constants ------------------------------------------------------------

def sinusoidal_pe(length: int, dim: int, dtype=np.float32) -> Tensor:
    """PE[p, 2i] = sin(p / 10000^(2i/dim)), PE[p, 2i+1] = cos(same)."""
    if dim % 2:
        raise ConfigError(f"sinusoidal position encoding needs an even dim, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.empty((length, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return Tensor(pe.astype(dtype))


# -- losses ---------------------------------------------------------------

def huber_loss(pred: Tensor, target, delta: float, mask) -> Tensor:
    """Masked mean Huber loss: ``sum(h(pred - target) * mask) / max(sum(mask), 1)``."""
    target = as_tensor(target)
    m = _data(mask)
    if pred.shape != target.shape or pred.shape != m.shape:
        raise DimensionError(f"huber_loss: pred {pred.shape}, target {target.shape}, mask {m.shape}")
    if delta <= 0:
        raise ValueError(f"huber_loss: delta must be positive, got {delta}")
    on = m > 0
    r = np.where(on, pred.data - target.data, 0.0).astype(pred.dtype)
    ar = np.abs(r)
    quad = ar <= delta
    h = np.where(quad, 0.5 * r * r, delta * (ar - 0.5 * delta))
    denom = max(float(m.sum()), 1.0)
    loss = np.asarray(h.sum() / denom, dtype=pred.dtype)

    def bw(g):
        dr = np.where(quad, r, delta * np.sign(r)) * (g / denom)
        dr = np.where(on, dr, 0.0).astype(pred.dtype)
        return dr, -dr
    return _node(loss, (pred, target), bw)
