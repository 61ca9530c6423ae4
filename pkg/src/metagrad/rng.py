"""Named random streams derived from one top-level seed.

Each consumer asks for ``stream(seed, "name", *indices)``; streams with
different names or indices are statistically independent, and adding a new
consumer never shifts the draws of an existing one.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *indices: int) -> np.random.Generator:
    entropy = [int(seed), stream_key(name), *(int(i) for i in indices)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def child_seed(seed: int, name: str, *indices: int) -> int:
    """A 63-bit integer seed for APIs that take plain integers."""
    return int(stream(seed, name, *indices).integers(0, 2**63 - 1))
