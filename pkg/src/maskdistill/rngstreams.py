"""Named, independent RNG streams derived from one master seed.

Every consumer of randomness (parameter init, masking, data order,
augmentation) draws from its own stream, so adding or removing one consumer
never perturbs the others. Stream identity is the tag tuple, hashed stably.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_entropy(tags: tuple) -> list[int]:
    out = []
    for t in tags:
        if isinstance(t, (int, np.integer)):
            out.append(int(t) & 0xFFFFFFFF)
        else:
            out.append(zlib.crc32(str(t).encode("utf-8")))
    return out


def stream(master_seed: int, *tags) -> np.random.Generator:
    """Deterministic generator for (master_seed, *tags)."""
    seq = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF] + _tag_entropy(tags))
    return np.random.Generator(np.random.PCG64(seq))


def stream_seed(master_seed: int, *tags) -> int:
    """A 63-bit scalar seed for the same stream identity (stored in MaskPlans)."""
    seq = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF] + _tag_entropy(tags))
    return int(seq.generate_state(1, np.uint64)[0] >> 1)
