"""Seeded, splittable random number generation.

All randomness in the library flows through :class:`Rng`, a thin wrapper
around numpy's Philox counter-based bit generator.  Philox is fully
specified (not platform-dependent), so a fixed ``(seed, stream)`` pair
reproduces the same draws on every machine.  Sub-streams are independent
generators keyed by ``(seed, stream)``; use :meth:`Rng.split` to hand a
private stream to each consumer instead of sharing one generator.
"""

from __future__ import annotations

import numpy as np

_MASK64 = 0xFFFF_FFFF_FFFF_FFFF


class Rng:
    """Deterministic random source keyed by (seed, stream).

    A fresh ``Rng(seed, stream)`` always produces the same call-for-call
    sequence.  A single instance is stateful and must not be shared
    across threads; split one stream per consumer instead.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = (self.stream << 64) | self.seed
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, stream: int) -> "Rng":
        """Fresh independent generator for the given sub-stream id."""
        return Rng(self.seed, stream)

    @property
    def generator(self) -> np.random.Generator:
        """Underlying numpy Generator (for shuffle/choice style calls)."""
        return self._gen

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std < 0:
            raise ValueError("std must be >= 0")
        if std == 0.0:
            return np.full(shape, float(mean))
        return self._gen.normal(loc=mean, scale=std, size=shape)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high] inclusive."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def choice(self, n: int, size=None, p=None, replace: bool = True):
        return self._gen.choice(n, size=size, p=p, replace=replace)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Rng(seed={self.seed}, stream={self.stream})"
