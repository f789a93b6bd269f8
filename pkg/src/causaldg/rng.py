"""Deterministic stream derivation on top of numpy's counter-based Philox.

Every consumer asks for a stream by (seed, *labels); the labels are hashed
into a SeedSequence spawn key, so any single setting, environment or epoch
is regenerable in isolation without replaying anything else.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


def stream(seed: int, *labels) -> np.random.Generator:
    key = tuple(_label_key(lab) for lab in labels)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
