"""Seeded random streams.

Every stochastic component draws from a named sub-stream of one root seed, so
changing e.g. the batch-order stream never perturbs data generation.  The bit
generator is Philox (counter-based), which numpy guarantees to be reproducible
across platforms.
"""

import zlib

import numpy as np

STREAMS = ("data", "init", "noise", "batch", "partition", "labels")


def substream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), key])))


def standard_normal(rng: np.random.Generator, size) -> np.ndarray:
    """Box-Muller transform over the generator's uniform stream."""
    size = (size,) if np.isscalar(size) else tuple(size)
    n = int(np.prod(size))
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1], keeps log finite
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
    return z[:n].reshape(size)
