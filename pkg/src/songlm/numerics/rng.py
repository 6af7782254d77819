"""Explicit counter-based random streams. There is no global RNG."""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    return zlib.crc32(str(part).encode())


def make_rng(seed: int, *stream) -> np.random.Generator:
    """A Philox generator for ``seed`` and an optional named sub-stream.

    ``make_rng(7, "dropout", 3)`` is independent of ``make_rng(7, "init")``
    and identical on every call.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key(p) for p in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *stream) -> int:
    return int(make_rng(seed, *stream).integers(0, 2**63 - 1))
