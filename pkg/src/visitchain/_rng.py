"""Deterministic RNG substreams.

All randomness in the package flows from integer key tuples fed to
:class:`numpy.random.SeedSequence`.  A work unit (bootstrap replicate,
simulated dataset, generated practice chunk) derives its generator from
``substream(seed, *unit keys*)``, so results do not depend on thread
count or execution order: replicate ``b`` always consumes stream
``(seed, ..., b)`` no matter which worker runs it.

Key conventions used across the package (first element is the user seed):

* ``(seed, _GENERATE, chunk_index)`` -- simulated visit data, per practice chunk.
* ``(seed, _RESAMPLE, b)``           -- cluster draw for bootstrap replicate b.
* ``(seed, _DATASET, d, ...)``        -- per-dataset streams in coverage studies.
"""

from __future__ import annotations

import numpy as np

# Stream tags keep substreams for different purposes disjoint even when
# the remaining key components collide.
GENERATE = 1
RESAMPLE = 2
DATASET = 3


def seed_keys(seed) -> tuple:
    """Normalize a user seed (int or key tuple) to a key tuple.

    Drivers that embed other drivers (a coverage study running bootstraps
    per simulated dataset) pass tuple seeds so every nested unit still
    gets a collision-free stream.
    """
    if isinstance(seed, (tuple, list)):
        return tuple(int(k) for k in seed)
    return (int(seed),)


def substream(*keys: int) -> np.random.Generator:
    """Return a Generator seeded by the integer key tuple.

    Args:
        *keys: non-negative integers identifying the work unit.

    Returns:
        An independent ``numpy.random.Generator``.
    """
    for k in keys:
        if k < 0:
            raise ValueError(f"substream keys must be non-negative, got {k}")
    return np.random.default_rng(np.random.SeedSequence(list(keys)))
