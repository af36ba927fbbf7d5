"""Deterministic RNG substreams.

All randomness in a run flows from one root seed. Subsystems never share a
generator; they derive a named child stream so that adding a consumer in one
place cannot shift the draws seen by another.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["substream", "child_seed"]


def child_seed(root_seed: int, name: str) -> np.random.SeedSequence:
    """Derive the seed sequence for the substream `name`."""
    if root_seed < 0:
        raise ValueError(f"root seed must be non-negative, got {root_seed}")
    # crc32 keeps the name -> entropy mapping stable across interpreter runs,
    # unlike hash().
    return np.random.SeedSequence([root_seed, zlib.crc32(name.encode("utf-8"))])


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Generator for the named substream of `root_seed`."""
    return np.random.default_rng(child_seed(root_seed, name))
