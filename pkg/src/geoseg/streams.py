"""Named random substreams.

Every piece of randomness in the package (scene generation, augmentation,
parameter init, epoch shuffling) pulls from a Philox counter-based
generator keyed by a root seed plus a path of labels. Two calls with the
same seed and path yield bit-identical streams on any platform, and
distinct paths give statistically independent streams, so results do not
depend on scheduling or call order across scenes.
"""

from __future__ import annotations

import zlib

import numpy as np


def _encode(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream path ints must be non-negative, got {part}")
        return int(part) & 0xFFFFFFFF
    raise TypeError(f"stream path parts must be int or str, got {type(part).__name__}")


def substream(seed: int, *path: int | str) -> np.random.Generator:
    """Generator for (seed, *path), independent of all other paths."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    key = tuple(_encode(p) for p in path)
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))
