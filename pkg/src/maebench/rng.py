"""Seeded random streams.

All randomness in the package flows through numpy ``Generator`` objects
backed by PCG64, whose output is specified bit-for-bit independent of
platform. Child streams are keyed by integer tuples so that, e.g., the
masking noise for (seed, epoch, step) never depends on how many draws
some other component made.
"""

import numpy as np


def seeded_rng(seed, *keys: int) -> np.random.Generator:
    """Return a generator for ``seed`` optionally specialised by ``keys``."""
    if keys:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))
    return np.random.Generator(np.random.PCG64(int(seed)))


def truncated_normal(rng: np.random.Generator, shape, std=0.02, bound=2.0, dtype=np.float32):
    """Normal(0, std) samples redrawn until they lie within ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(dtype)
