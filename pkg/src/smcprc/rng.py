"""Deterministic RNG stream derivation.

Every stochastic component receives an explicit ``numpy.random.Generator``;
nothing touches global RNG state. Streams are derived from a single master
seed by a counter-style split on a path of non-negative integers, so that a
run scheduled serially and a run scheduled across workers consume identical
randomness: stream ``(seed, t, i)`` belongs to particle slot ``i`` at step
``t`` no matter who draws from it first.
"""

from __future__ import annotations

import numpy as np

__all__ = ["substream"]


def substream(seed: int, *path: int) -> np.random.Generator:
    """Return the generator for ``path`` under the given master seed.

    Parameters
    ----------
    seed : int
        Master seed of the run.
    *path : int
        Non-negative integers addressing the stream, e.g. ``(step, slot)``.
        Distinct paths yield statistically independent streams; the same
        path always yields the same stream.
    """
    key = tuple(int(p) for p in path)
    if any(p < 0 for p in key):
        raise ValueError(f"stream path must be non-negative, got {key}")
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
