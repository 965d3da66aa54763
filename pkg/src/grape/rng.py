"""Seed derivation and random generators.

Every random stream in the package (masks, label splits, weight init,
edge dropout) comes from a Philox counter-based generator keyed by a
64-bit seed. Child seeds are derived by hashing the parent seed with role
tags, so streams are independent and stable across platforms.
"""
from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "make_rng"]


def derive_seed(seed: int, *tags: object) -> int:
    """Return a 64-bit seed derived from ``seed`` and an ordered tag tuple."""
    text = "/".join([str(int(seed))] + [str(t) for t in tags])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed: int, *tags: object) -> np.random.Generator:
    key = derive_seed(seed, *tags) if tags else int(seed) & (2**64 - 1)
    return np.random.Generator(np.random.Philox(key=key))
