"""Deterministic fan-out of one master seed into per-stage substreams.

Every random draw in the package flows through a numpy Generator created
here, keyed by the master seed plus a path of small integers (stage tag,
cell index, cycle index, fold index, ...). Identical keys give identical
streams on every platform with the same numpy version.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# Stage tags used by the pipeline when fanning out its master seed.
STAGE_DATA = 1
STAGE_WINDOWS = 2
STAGE_FOLDS = 3
STAGE_MODEL_INIT = 4
STAGE_TRAIN = 5
STAGE_FOREST = 6


def _entropy(seed: int, keys: tuple[int, ...]) -> list[int]:
    return [int(seed) & _MASK64, *(int(k) & _MASK64 for k in keys)]


def child_seed(seed: int, *keys: int) -> int:
    """Derive a 64-bit child seed from a master seed and integer path keys."""
    ss = np.random.SeedSequence(_entropy(seed, keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """A fresh Generator for the substream identified by (seed, *keys)."""
    return np.random.default_rng(np.random.SeedSequence(_entropy(seed, keys)))
