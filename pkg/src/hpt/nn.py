"""Parameterised building blocks: registry, init, linear, attention, transformer block."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .rng import RngState
from .tensor import Tensor

NORMAL_STD = 0.02


# -- parameters -----------------------------------------------------------

@dataclass
class Param:
    tensor: Tensor
    trainable: bool = True


def _under(name: str, prefix: str) -> bool:
    return not prefix or name == prefix or name.startswith(prefix + ".")


class ParamRegistry:
    """Ordered ``name -> (tensor, trainable)`` map with dotted hierarchical names."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, tensor: Tensor, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        tensor.requires_grad = trainable
        self._params[name] = Param(tensor, trainable)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if _under(n, prefix)]

    def items(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for n, p in self._params.items():
            if _under(n, prefix):
                yield n, p.tensor

    def is_trainable(self, name: str) -> bool:
        return self._params[name].trainable

    def trainable_names(self, prefix: str = "") -> list[str]:
        return [n for n, p in self._params.items() if p.trainable and _under(n, prefix)]

    def set_trainable(self, prefix: str, flag: bool) -> int:
        hits = 0
        for n, p in self._params.items():
            if _under(n, prefix):
                p.trainable = flag
                p.tensor.requires_grad = flag
                hits += 1
        return hits

    def freeze(self, prefix: str) -> int:
        """Mark every tensor under ``prefix`` as frozen; returns the number affected."""
        return self.set_trainable(prefix, False)

    def unfreeze(self, prefix: str) -> int:
        return self.set_trainable(prefix, True)

    def remove(self, prefix: str) -> None:
        for n in self.names(prefix):
            del self._params[n]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.tensor.grad = None


def param_count(registry: ParamRegistry, prefix: str = "") -> int:
    return sum(t.size for _, t in registry.items(prefix))


def init_params(shape, scheme: str, rng: RngState | None, dtype=np.float32) -> Tensor:
    """Allocate a parameter tensor.

    ``normal``: N(0, 0.02), for embeddings and learnable tokens.
    ``fan_in``: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in = shape[0].
    ``zeros`` / ``ones``: constants (biases, residual output projections, LN).

    ``rng=None`` allocates zeros regardless of scheme; used for skeletons that
    are filled from a checkpoint.
    """
    shape = tuple(int(s) for s in shape)
    if scheme == "ones":
        return Tensor(np.ones(shape, dtype=dtype))
    if scheme == "zeros" or rng is None:
        return Tensor(np.zeros(shape, dtype=dtype))
    if scheme == "normal":
        return Tensor(rng.normal(shape, 0.0, NORMAL_STD, dtype=dtype))
    if scheme == "fan_in":
        bound = 1.0 / math.sqrt(shape[0])
        return Tensor(rng.uniform(shape, -bound, bound, dtype=dtype))
    raise ValueError(f"unknown init scheme {scheme!r}")


@dataclass
class ForwardMode:
    """Training switches threaded through a forward pass."""

    training: bool = False
    dropout: float = 0.0
    rng: RngState | None = None

    def drop(self, x: Tensor) -> Tensor:
        if not self.training or self.dropout <= 0.0:
            return x
        return T.dropout(x, self.dropout, self.rng, training=True)


EVAL = ForwardMode()


# -- linear / mlp ---------------------------------------------------------

@dataclass
class LinearParams:
    w: Tensor
    b: Tensor

    @classmethod
    def create(cls, reg: ParamRegistry, name: str, d_in: int, d_out: int,
               rng: RngState | None, dtype=np.float32, zero: bool = False) -> "LinearParams":
        w = init_params((d_in, d_out), "zeros" if zero else "fan_in", rng, dtype)
        return cls(reg.add(f"{name}.w", w), reg.add(f"{name}.b", init_params((d_out,), "zeros", rng, dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(x, self.w, self.b)


def linear_forward(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    return T.linear(x, w, b)


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def create(cls, reg: ParamRegistry, name: str, d: int, dtype=np.float32) -> "LayerNormParams":
        return cls(reg.add(f"{name}.gamma", init_params((d,), "ones", None, dtype)),
                   reg.add(f"{name}.beta", init_params((d,), "zeros", None, dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


@dataclass
class MlpParams:
    """Stack of linear layers with GELU between them (none after the last)."""

    layers: list[LinearParams]

    @classmethod
    def create(cls, reg: ParamRegistry, name: str, dims: list[int], rng: RngState | None,
               dtype=np.float32, zero_last: bool = False) -> "MlpParams":
        layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            layers.append(LinearParams.create(reg, f"{name}.fc{i}", a, b, rng, dtype, zero=zero_last and last))
        return cls(layers)

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.gelu(x)
        return x


# -- attention ------------------------------------------------------------

@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    n_heads: int
    head_dim: int

    @classmethod
    def create(cls, reg: ParamRegistry, name: str, d_model: int, n_heads: int, head_dim: int,
               rng: RngState | None, dtype=np.float32, zero_out: bool = True) -> "AttentionParams":
        inner = n_heads * head_dim
        tensors = {}
        for p in "qkv":
            tensors[f"w{p}"] = reg.add(f"{name}.w{p}", init_params((d_model, inner), "fan_in", rng, dtype))
            tensors[f"b{p}"] = reg.add(f"{name}.b{p}", init_params((inner,), "zeros", rng, dtype))
        tensors["wo"] = reg.add(f"{name}.wo", init_params((inner, d_model), "zeros" if zero_out else "fan_in", rng, dtype))
        tensors["bo"] = reg.add(f"{name}.bo", init_params((d_model,), "zeros", rng, dtype))
        return cls(n_heads=n_heads, head_dim=head_dim, **tensors)

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]


def _split_heads(x: Tensor, h: int, dh: int) -> Tensor:
    # [..., S, h*dh] -> [..., h, S, dh]
    lead = x.shape[:-2]
    x = x.reshape(lead + (x.shape[-2], h, dh))
    n = len(lead)
    return x.transpose(tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    lead = x.shape[:-3]
    n = len(lead)
    h, s, dh = x.shape[-3:]
    x = x.transpose(tuple(range(n)) + (n + 1, n, n + 2))
    return x.reshape(lead + (s, h * dh))


def attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, p: AttentionParams,
              mode: ForwardMode = EVAL, causal: bool = False) -> Tensor:
    """Multi-head scaled dot-product attention, including the output projection."""
    h, dh = p.n_heads, p.head_dim
    q = _split_heads(linear_forward(q_in, p.wq, p.bq), h, dh)
    k = _split_heads(linear_forward(k_in, p.wk, p.bk), h, dh)
    v = _split_heads(linear_forward(v_in, p.wv, p.bv), h, dh)
    if q.ndim != k.ndim:
        q = T.expand(q, k.shape[: k.ndim - q.ndim])
    scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(dh))
    if causal:
        n, l = scores.shape[-2:]
        blocked = np.triu(np.ones((n, l), dtype=bool), k=1 + l - n)
        scores = T.add(scores, Tensor(np.where(blocked, -1e9, 0.0).astype(scores.dtype)))
    w = mode.drop(T.softmax(scores, axis=-1))
    return linear_forward(_merge_heads(T.matmul(w, v)), p.wo, p.bo)


def cross_attend(tokens: Tensor, context: Tensor, params: AttentionParams,
                 key_pos: Tensor | None = None, mode: ForwardMode = EVAL) -> Tensor:
    """Learnable queries attend over a context set; returns ``tokens + attn``.

    ``tokens`` is [N, d] (shared) or [B, N, d]; ``context`` is [L, d] or
    [B, L, d]. ``key_pos`` (if given) is added to the key input only, so the
    value path carries content alone.
    """
    if context.shape[-2] == 0:
        raise DimensionError("cross_attend: empty context (L = 0)")
    if tokens.shape[-1] != context.shape[-1] or tokens.shape[-1] != params.d_model:
        raise DimensionError(f"cross_attend: tokens {tokens.shape}, context {context.shape}, "
                             f"params width {params.d_model}")
    if tokens.ndim < context.ndim:
        tokens = T.expand(tokens, context.shape[: context.ndim - tokens.ndim])
    keys = context if key_pos is None else T.add(context, key_pos)
    return T.add(tokens, attention(tokens, keys, context, params, mode))


# -- transformer block ----------------------------------------------------

@dataclass
class TransformerBlockParams:
    ln1: LayerNormParams
    attn: AttentionParams
    ln2: LayerNormParams
    mlp: MlpParams

    @classmethod
    def create(cls, reg: ParamRegistry, name: str, d: int, n_heads: int, rng: RngState | None,
               dtype=np.float32, mlp_ratio: int = 4) -> "TransformerBlockParams":
        if d % n_heads:
            raise DimensionError(f"width {d} is not divisible by {n_heads} heads")
        return cls(
            ln1=LayerNormParams.create(reg, f"{name}.ln1", d, dtype),
            attn=AttentionParams.create(reg, f"{name}.attn", d, n_heads, d // n_heads, rng, dtype),
            ln2=LayerNormParams.create(reg, f"{name}.ln2", d, dtype),
            mlp=MlpParams.create(reg, f"{name}.mlp", [d, mlp_ratio * d, d], rng, dtype, zero_last=True),
        )


def transformer_block(x: Tensor, p: TransformerBlockParams, mode: ForwardMode = EVAL,
                      causal: bool = False) -> Tensor:
    """Pre-LN block: ``x + Attn(LN(x))`` then ``+ MLP(LN(.))``."""
    if x.shape[-1] != p.attn.d_model:
        raise DimensionError(f"transformer_block: input width {x.shape[-1]} != {p.attn.d_model}")
    y = p.ln1(x)
    h = T.add(x, attention(y, y, y, p.attn, mode, causal=causal))
    return T.add(h, mode.drop(p.mlp(p.ln2(h))))
