"""Seeded random-source construction.

Every stochastic operation in the package takes an explicit numpy Generator.
Generators are counter-based (Philox), so independent streams derive from a
base seed without overlap: stream ``k`` of seed ``s`` uses the 128-bit Philox
key ``(s, k)``. Repetition ``r`` of an experiment uses seed ``base_seed + r``
on stream 0; auxiliary draws (bootstrap resampling) use higher streams.
"""
import numpy as np

_MASK = (1 << 64) - 1


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Return a Generator for the given (seed, stream) pair."""
    key = np.array([seed & _MASK, stream & _MASK], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
