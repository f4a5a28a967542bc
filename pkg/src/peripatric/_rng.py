"""Per-replicate random streams.

Every replicate draws from its own PCG64 stream keyed by ``(seed, *keys)``
through :class:`numpy.random.SeedSequence`, which hashes the 64-bit words
together. Results are therefore independent of the order or the process in
which replicates run.
"""

import numpy as np


def replicate_rng(seed, *keys):
    """Generator for replicate ``keys`` of a run seeded with ``seed``."""
    words = [int(seed)] + [int(k) for k in keys]
    if any(w < 0 for w in words):
        raise ValueError("seed and replicate keys must be non-negative")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def as_generator(rng):
    """Accept a Generator, an integer seed, or None."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
