"""Seeded random streams.

Every run derives its generators from a single 64-bit seed through
``numpy.random.SeedSequence``; children are spawned in a fixed order so a
serialized seed reproduces every draw. The bit generator is PCG64 (numpy's
default), which is stable across numpy releases for a given SeedSequence.
"""

from __future__ import annotations

import numpy as np

# spawn order is part of the reproducibility contract, do not reorder
STREAMS = ("warmup", "order", "masks", "compress", "layers")


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for each source of randomness in a run."""
    ss = np.random.SeedSequence(int(seed))
    children = ss.spawn(len(STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(STREAMS, children)}
