"""Named, independent random streams derived from a single master seed.

Every stochastic component (room sampling, endpoint placement, source
synthesis, batch construction, weight init, dropout, ...) pulls its own
generator by name, so changing how one consumer draws numbers never
shifts the sequences seen by the others.
"""

from __future__ import annotations

import zlib

import numpy as np


def named_stream(master_seed: int, name: str) -> np.random.Generator:
    """Return an independent generator for (master_seed, name)."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([master_seed, key]))


def child_seed(master_seed: int, name: str) -> int:
    """Derive a stable integer sub-seed (for passing across process or
    checkpoint boundaries)."""
    key = zlib.crc32(name.encode("utf-8"))
    return int(np.random.SeedSequence([master_seed, key]).generate_state(1)[0])
