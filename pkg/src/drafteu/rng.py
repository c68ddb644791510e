"""Deterministic seed derivation and counter-based random streams.

Every random draw in the package comes from a Philox stream keyed by a
64-bit seed. Child seeds are derived by hashing ``(seed, stream_id)``
through the SplitMix64 finalizer, so results never depend on the order in
which work items are evaluated.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix64(x: int) -> int:
    """SplitMix64 finalizer; a bijection on 64-bit integers."""
    x &= MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive(seed: int, *stream: int) -> int:
    """Derive a child seed from ``seed`` and a path of stream ids.

    For a fixed parent, distinct single stream ids give distinct children:
    ``(i + 1) * GOLDEN`` is injective mod 2**64 and ``mix64`` is a bijection.
    """
    s = seed & MASK64
    for sid in stream:
        s = mix64(s ^ mix64(((sid & MASK64) + 1) * _GOLDEN))
    return s


def stream(seed: int, *path: int) -> np.random.Generator:
    """Return a Philox generator keyed by ``derive(seed, *path)``."""
    return np.random.Generator(np.random.Philox(key=derive(seed, *path)))
