"""Deterministic random-stream derivation.

Every stochastic stage in the package draws from a child generator derived
from (seed, *path) so that runs are reproducible bit-for-bit and stages can
be reordered or skipped without perturbing each other's streams.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _word(tag: int | str) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    # stable across processes (unlike hash(), which is salted)
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def child_rng(seed: int, *path: int | str) -> np.random.Generator:
    """Child generator for a named stage, independent across distinct paths."""
    words = [_word(seed)] + [_word(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(words))
