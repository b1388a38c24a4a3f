"""Seed-stream derivation.

Every random draw in the simulator comes from a PCG64 generator whose
SeedSequence is keyed by ``(experiment_seed, stream, *indices)``. Streams are
independent of one another, so changing e.g. the number of rounds never
perturbs dataset generation or the partition.
"""

from __future__ import annotations

import numpy as np

# Stream tags. Append only; reordering would change every derived stream.
DATASET = 0
PARTITION = 1
INIT = 2
PARTICIPANTS = 3
LOADER = 4
BALANCED = 5
TEST = 6
TAILS = 7


def stream(seed: int, tag: int, *indices: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, tag, *indices)``."""
    if seed < 0:
        raise ValueError(f"seed must be nonnegative, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(tag), *map(int, indices)))
    return np.random.Generator(np.random.PCG64(ss))
