"""Randomness sources.

Everything takes an explicit ``numpy.random.Generator``. Seeded generators are
Philox-based so independent streams can be split off deterministically;
unseeded ones draw their key from OS entropy.
"""
import numpy as np


def make_rng(seed=None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


def spawn(rng: np.random.Generator, n: int = 1) -> list[np.random.Generator]:
    """Derive ``n`` independent child generators from ``rng``."""
    return [np.random.Generator(np.random.Philox(int(k))) for k in rng.integers(0, 2**63, size=n)]


def uniform_mod(rng: np.random.Generator, q: int, size) -> np.ndarray:
    return rng.integers(0, q, size=size, dtype=np.uint64)
