"""Deterministic random-stream derivation.

All randomness in the library flows through numpy ``Generator`` objects backed
by the counter-based Philox bit generator, keyed by a 64-bit master seed plus
an integer path. A given ``(seed, *path)`` pair names the same stream on every
platform and every release, which is what makes plans, Monte-Carlo draws, and
simulated datasets byte-reproducible. Stream splitting uses
``numpy.random.SeedSequence`` spawn keys, so substreams are statistically
independent by construction.
"""

from __future__ import annotations

import numpy as np


def seed_sequence(master_seed: int, *path: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(
        entropy=int(master_seed), spawn_key=tuple(int(p) for p in path)
    )


def substream(master_seed: int, *path: int) -> np.random.Generator:
    """Generator for the stream named by ``(master_seed, *path)``."""
    return np.random.Generator(np.random.Philox(seed_sequence(master_seed, *path)))


def derived_seed(master_seed: int, *path: int) -> int:
    """A 64-bit seed deterministically derived from the master seed and a path."""
    return int(seed_sequence(master_seed, *path).generate_state(1, np.uint64)[0])
