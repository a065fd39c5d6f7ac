"""Stateless RNG derivation.

Every random draw in the package comes from a Philox counter-based bit
generator keyed by ``(seed, path)``, where ``path`` is a tuple of small ints
and strings naming the consumer (stage, step index, ...). Philox streams are
fixed by the algorithm, not the platform, and deriving a fresh generator per
(seed, path) makes training resumable bit-exactly: step k draws the same
batch whether or not the process restarted at step k.
"""

from __future__ import annotations

import zlib

import numpy as np


def _encode(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


def make_rng(seed: int, *path) -> np.random.Generator:
    """Generator for the given seed and derivation path."""
    key = np.random.SeedSequence(
        entropy=int(seed), spawn_key=tuple(_encode(p) for p in path)
    )
    return np.random.Generator(np.random.Philox(key))
