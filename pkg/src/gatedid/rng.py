"""Seeded random streams.

Every stream is Philox4x64-10 (counter-based) keyed through numpy's
SeedSequence with ``entropy=seed`` and ``spawn_key=(crc32(purpose), *index)``.
The same (seed, purpose, index) always yields the same draws, independent
of what other streams were consumed before it.
"""

from __future__ import annotations

import zlib

import numpy as np

DATA = "data"
INIT = "init"
NOISE = "noise"
WORLD = "world"  # frozen generative map of the synthetic world


def purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *index: int) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(purpose_code(purpose), *(int(i) for i in index)))
    return np.random.Generator(np.random.Philox(ss))
