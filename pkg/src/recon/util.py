"""Small shared helpers: stable hashing, seeded generators, worker counts."""

from __future__ import annotations

import os

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x00000100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash; stable across platforms and processes."""
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def seeded_rng(*key) -> np.random.Generator:
    """Generator derived from a structured key.

    Strings are folded in via fnv1a64 so that (seed, "purpose", step, doc_id)
    style keys are reproducible everywhere. Every random decision in the
    package flows through one of these, which is what makes training runs
    replayable from (seed, config, corpus) alone.
    """
    entropy = []
    for part in key:
        if isinstance(part, str):
            entropy.append(fnv1a64(part.encode("utf-8")))
        elif isinstance(part, (int, np.integer)):
            entropy.append(int(part) & _MASK64)
        else:
            raise TypeError(f"rng key parts must be int or str, got {type(part)!r}")
    return np.random.default_rng(np.random.SeedSequence(entropy))


def worker_count() -> int:
    """Worker cap: RECON_THREADS if set, else machine parallelism."""
    raw = os.environ.get("RECON_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"RECON_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ValueError(f"RECON_THREADS must be >= 1, got {n}")
    return n
