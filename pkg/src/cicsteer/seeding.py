"""Named substream derivation so every component reseeds independently."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, *labels: str) -> np.random.Generator:
    """Generator derived from a top-level seed plus a chain of string labels.

    Stable across processes and platforms: labels hash via crc32, so
    substream(7, "data", "episode3") is always the same stream.
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    entropy += [zlib.crc32(label.encode("utf-8")) for label in labels]
    return np.random.default_rng(np.random.SeedSequence(entropy))
