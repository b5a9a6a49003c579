"""Seeded xorshift64* generator, vectorized over independent lanes.

Each named weight tensor draws from its own stream so model construction
does not depend on build order. A stream is a bank of ``LANES`` xorshift64*
states, lane ``i`` seeded with ``splitmix64(stream_seed + i)`` where
``stream_seed = splitmix64(seed ^ fnv1a64(name))``. All lanes advance in
lockstep; step ``t`` of lane ``i`` becomes output element ``t * LANES + i``.
Outputs keep the top 53 bits as a uniform double in [0, 1).
"""
from __future__ import annotations

import numpy as np

LANES = 1024
_MASK = (1 << 64) - 1


def splitmix64(x):
    """Scalar splitmix64 finalizer on a Python int."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def fnv1a64(text):
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK
    return h


def _lane_states(stream_seed):
    states = np.array([splitmix64((stream_seed + i) & _MASK) for i in range(LANES)], dtype=np.uint64)
    # xorshift must never hold the all-zero state
    states[states == 0] = np.uint64(0x9E3779B97F4A7C15)
    return states


class XorShiftStream:
    """One named stream; successive calls continue where the last one stopped."""

    def __init__(self, seed, name):
        self.stream_seed = splitmix64((int(seed) & _MASK) ^ fnv1a64(name))
        self._state = _lane_states(self.stream_seed)
        self._buffer = np.empty(0, dtype=np.float64)

    def _step(self):
        x = self._state
        x ^= x >> np.uint64(12)
        x ^= x << np.uint64(25)
        x ^= x >> np.uint64(27)
        out = x * np.uint64(0x2545F4914F6CDD1D)
        return (out >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def uniform(self, n):
        """``n`` doubles in [0, 1)."""
        chunks = [self._buffer]
        have = self._buffer.size
        while have < n:
            c = self._step()
            chunks.append(c)
            have += c.size
        allv = np.concatenate(chunks)
        self._buffer = allv[n:]
        return allv[:n].copy()

    def symmetric(self, shape, scale):
        """Uniform values in [-scale, scale) with the given shape."""
        n = int(np.prod(shape))
        return ((self.uniform(n) * 2.0 - 1.0) * scale).reshape(shape)
