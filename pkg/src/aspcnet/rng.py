"""Seeded random streams.

The generator is numpy's Philox-4x64 counter-based bit generator, seeded
through :class:`numpy.random.SeedSequence` (a documented hash-mixing of the
integer seed and any stream keys). Both are specified bit-for-bit, so a seed
produces the same sequence on every platform and thread count.
"""

from __future__ import annotations

import numpy as np

from .tensor import get_default_dtype


class Rng:
    """Deterministic stream keyed by ``seed`` and optional sub-stream keys."""

    def __init__(self, seed: int, *keys: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence([self.seed, *self.keys])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def spawn(self, *keys: int) -> "Rng":
        """Independent stream for ``(seed, *self.keys, *keys)``."""
        return Rng(self.seed, *self.keys, *keys)

    def uniform(self, low=0.0, high=1.0, size=None, dtype=None) -> np.ndarray:
        out = self._gen.uniform(low, high, size)
        return np.asarray(out, dtype=dtype or get_default_dtype())

    def normal(self, loc=0.0, scale=1.0, size=None, dtype=None) -> np.ndarray:
        out = self._gen.normal(loc, scale, size)
        return np.asarray(out, dtype=dtype or get_default_dtype())

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n) -> np.ndarray:
        return self._gen.permutation(n)

    def raw(self, n: int) -> np.ndarray:
        """``n`` raw 64-bit words straight from the bit generator."""
        return self._gen.bit_generator.random_raw(n)

    def glorot_uniform(self, shape, fan_in: int, fan_out: int) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self.uniform(-limit, limit, shape)

    def routing_uniform(self, shape, fan_in: int, outputs: int) -> np.ndarray:
        """Uniform transform-matrix init for a routed capsule layer.

        At initialization every coupling is ``1 / outputs``, so the routed
        sum averages ``fan_in`` vote terms with that weight. Variance
        ``outputs**2 / fan_in`` keeps the per-component variance of the sum
        equal to that of the inputs, which keeps squash out of its
        quadratic regime near zero.
        """
        limit = outputs * np.sqrt(3.0 / fan_in)
        return self.uniform(-limit, limit, shape)
