"""Deterministic counter-based random streams.

Streams derive from (master seed, *stream indices) through SeedSequence
hashing on top of the Philox counter-based generator, so per-sample and
per-step streams are independent of generation order and safe to fan out
across workers.
"""

from __future__ import annotations

import numpy as np


def derive_rng(master_seed: int, *stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(master_seed: int, *stream: int) -> int:
    """Collapse (master seed, *stream) to a single reproducible 64-bit seed."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(s) for s in stream))
    return int(ss.generate_state(1, np.uint64)[0])
