from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingError
from ..nn import ParamRegistry


@dataclass
class OptimizerState:
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def decays(name: str, shape: tuple[int, ...]) -> bool:
    """Weight decay applies to matrices only (not biases, LayerNorm, or vectors)."""
    return len(shape) >= 2


def adamw_step(registry: ParamRegistry, state: OptimizerState, lr: float,
               names: list[str] | None = None) -> None:
    """Decoupled-weight-decay Adam update of ``names`` (default: every trainable tensor).

    Frozen tensors are skipped. Each updated tensor keeps its own step count, so
    a stem that is only occasionally sampled gets correct bias correction.
    Gradients of updated tensors are cleared afterwards.
    """
    b1, b2 = state.betas
    if names is None:
        names = registry.trainable_names()
    for name in names:
        if not registry.is_trainable(name):
            continue
        p = registry[name]
        g = p.grad
        if g is None:
            raise TrainingError(f"trainable parameter {name!r} has no gradient")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.t[name] = 0
        t = state.t[name] = state.t[name] + 1
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        data = p.data
        if state.weight_decay and decays(name, data.shape):
            data = data * (1.0 - lr * state.weight_decay)
        p.data = (data - lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype, copy=False)
        p.grad = None
    state.step += 1


def clip_grad_norm(registry: ParamRegistry, names: list[str], max_norm: float) -> float:
    total = math.sqrt(sum(float((registry[n].grad.astype(np.float64) ** 2).sum())
                          for n in names if registry[n].grad is not None))
    if total > max_norm > 0:
        s = max_norm / (total + 1e-12)
        for n in names:
            if registry[n].grad is not None:
                registry[n].grad = registry[n].grad * s
    return total


def cosine_lr(step: int, warmup: int, total: int, base: float, min_frac: float = 0.1) -> float:
    """Linear warmup to ``base`` then cosine decay to ``base * min_frac`` at ``total``."""
    if warmup > 0 and step < warmup:
        return base * step / warmup
    if total <= warmup:
        return base
    progress = min(1.0, (step - warmup) / (total - warmup))
    return base * (min_frac + (1.0 - min_frac) * 0.5 * (1.0 + math.cos(math.pi * progress)))
