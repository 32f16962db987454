"""Seeded random streams. One ``Rng`` per consumer keeps draws reproducible."""
from __future__ import annotations

import numpy as np


class Rng:
    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self._gen.bit_generator.state = value

    def child(self, key: int) -> "Rng":
        """Independent stream derived from this seed and ``key``."""
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, int(key)])
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * scale

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def random(self, shape=None):
        return self._gen.random(shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
