"""Counter-based random streams.

Every stream is numpy's Philox4x64-10 generator keyed by a 64-bit seed.
Philox is counter based, so a ``(seed, counter)`` pair pins the whole
future draw sequence independent of platform. Sub-streams are keyed by
``derive_seed(seed, purpose)``: the first 8 bytes (little-endian) of
``sha256(f"{seed}:{purpose}")``.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, purpose: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class RngState:
    """A Philox stream identified by ``(seed, counter)``."""

    algorithm = "philox4x64-10"

    def __init__(self, seed: int, counter: int = 0):
        self._seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self._seed, counter=int(counter)))

    @property
    def seed(self) -> int:
        return self._seed

    @property
    def counter(self) -> int:
        words = self._gen.bit_generator.state["state"]["counter"]
        return sum(int(w) << (64 * i) for i, w in enumerate(words))

    def child(self, purpose: str) -> "RngState":
        """Independent stream for ``purpose``; does not consume draws from this one."""
        return RngState(derive_seed(self._seed, purpose))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, dtype=np.float64) -> np.ndarray:
        out = self._gen.random(shape, dtype=dtype)
        if low != 0.0 or high != 1.0:
            out *= high - low
            out += low
        return out

    def normal(self, shape, mean: float = 0.0, std: float = 1.0, dtype=np.float64) -> np.ndarray:
        out = self._gen.standard_normal(shape, dtype=dtype)
        if std != 1.0:
            out *= std
        if mean != 0.0:
            out += mean
        return out

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def choice(self, probs) -> int:
        return int(self._gen.choice(len(probs), p=probs))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bernoulli_keep(self, shape, keep: float, dtype=np.float32) -> np.ndarray:
        return (self._gen.random(shape, dtype=dtype) < keep).astype(dtype)

    def __repr__(self) -> str:
        return f"RngState(seed={self._seed}, counter={self.counter})"
