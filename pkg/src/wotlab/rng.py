"""Seeded, splittable random streams.

Every consumer asks for a stream by ``(seed, purpose)``. The purpose string is
hashed with SHA-256 so the mapping is stable across processes and platforms
(Python's builtin ``hash`` is salted per process).
"""

from __future__ import annotations

import hashlib

import numpy as np


def _purpose_words(purpose: str) -> list[int]:
    digest = hashlib.sha256(purpose.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def stream(seed: int, purpose: str = "") -> np.random.Generator:
    """PCG64 generator keyed by a 64-bit seed and a purpose label."""
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    entropy = [seed & 0xFFFFFFFF, seed >> 32, *_purpose_words(purpose)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, purpose: str) -> int:
    """A child 64-bit seed, for handing to code that wants a plain integer."""
    return int(stream(seed, purpose).integers(0, 2**63 - 1))
