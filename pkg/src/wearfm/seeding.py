"""Deterministic random-stream derivation.

All randomness in the package flows through numpy Generators derived from a
single integer seed. Child streams are derived with SeedSequence spawn keys so
that e.g. (seed, epoch, batch) always yields the same stream, independent of
call order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _as_key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k)


def rng_from(seed: int, *keys) -> np.random.Generator:
    """Generator for the stream identified by (seed, *keys).

    String keys are hashed with crc32 so names like "mask" or "init" can be
    used directly.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_as_key(k) for k in keys))
    return np.random.default_rng(ss)


def as_rng(seed_or_rng) -> np.random.Generator:
    """Accept either an integer seed or an existing Generator."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return rng_from(int(seed_or_rng))
