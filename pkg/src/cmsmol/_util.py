"""Pinned hashing and seed derivation shared by every module.

All hashes are seedless 64-bit functions so fingerprints, docking stubs and
file digests are bit-reproducible across platforms and interpreter runs
(Python's builtin ``hash`` is salted per process and is never used).
"""
from __future__ import annotations

import hashlib
from typing import Iterable

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
HASH_SEED = 0x243F6A8885A308D3

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def mix64(z: int) -> int:
    """SplitMix64 finalizer."""
    z = (z + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def hash_ints(values: Iterable[int]) -> int:
    """Order-sensitive 64-bit hash of a sequence of (possibly negative) ints."""
    h = HASH_SEED
    for v in values:
        h = mix64(h ^ (int(v) & MASK64))
    return h


def hash_text(text: str) -> int:
    """FNV-1a over UTF-8 bytes, finalized with :func:`mix64`."""
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & MASK64
    return mix64(h)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# Seed derivation tree: seed -> phase -> epoch -> example (or seed -> candidate).
# Every leaf generator depends only on its key path, so sharding work across
# any number of workers cannot change results.
def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *keys: int) -> int:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
