"""Seeded, splittable random streams.

Streams are keyed by (seed, purpose, counter...) through numpy's
SeedSequence, so a stream for training step k can be rebuilt from the seed
alone, which is what makes checkpoint resume bit-identical.
"""

from __future__ import annotations

import numpy as np

INIT = 0
DROPOUT = 1
SHUFFLE = 2
DATA = 3
GRADCHECK = 4


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *keys])))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until within ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std
