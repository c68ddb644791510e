"""Probability-simplex math: normalization, entropy, KL, mixtures and JSD.

All quantities are in nats. Distributions are plain 1-D float64 numpy
arrays; ``as_categorical`` validates and freezes them.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from drafteu.errors import InvalidInputError

SUM_TOL = 1e-9
DEFAULT_FLOOR = 1e-12


def as_categorical(p, name: str = "p") -> np.ndarray:
    """Validate ``p`` as a distribution over at least two outcomes.

    Returns a read-only float64 copy.
    """
    arr = np.array(p, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise InvalidInputError(f"{name} must be a 1-D array with at least 2 entries")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} has non-finite entries")
    if np.any(arr < 0):
        raise InvalidInputError(f"{name} has negative entries")
    if abs(arr.sum() - 1.0) > SUM_TOL:
        raise InvalidInputError(f"{name} sums to {arr.sum()!r}, not 1")
    arr.flags.writeable = False
    return arr


def softmax_normalize(logits) -> np.ndarray:
    """Map finite logits to the simplex using max-subtraction.

    >>> softmax_normalize([0.0, 0.0])
    array([0.5, 0.5])
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size < 2:
        raise InvalidInputError("logits must be a 1-D array with at least 2 entries")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits must be finite")
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D logit array (no validation; hot path)."""
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _xlogy_terms(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    # p_i * ln(p_i / q_i) with 0 ln 0 := 0; callers handle q_i == 0 < p_i
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * (np.log(p[pos]) - np.log(q[pos]))
    return out


def entropy(p) -> float:
    """Shannon entropy ``-sum p ln p`` with ``0 ln 0 = 0``."""
    p = as_categorical(p)
    pos = p[p > 0]
    return float(-np.sum(pos * np.log(pos)))


def kl(p, q, floor: Optional[float] = None) -> float:
    """KL(p || q) in nats.

    Returns ``math.inf`` when some ``p_i > 0`` has ``q_i == 0``. With
    ``floor`` set, entries of ``q`` below it are raised to it instead, so
    the result is always finite (the floored ``q`` is not renormalized).
    """
    p = as_categorical(p, "p")
    q = as_categorical(q, "q")
    if p.shape != q.shape:
        raise InvalidInputError(f"dimension mismatch: {p.size} vs {q.size}")
    if floor is not None:
        q = np.maximum(q, floor)
    elif np.any((p > 0) & (q == 0)):
        return float("inf")
    return float(np.sum(_xlogy_terms(p, q)))


def _check_family(members: Sequence, min_count: int) -> np.ndarray:
    if len(members) < min_count:
        raise InvalidInputError(f"need at least {min_count} member(s), got {len(members)}")
    arrs = [as_categorical(m, f"members[{i}]") for i, m in enumerate(members)]
    v = arrs[0].size
    if any(a.size != v for a in arrs):
        raise InvalidInputError("members do not share a vocabulary size")
    return np.stack(arrs)


def _check_weights(weights, k: int) -> np.ndarray:
    if weights is None:
        return np.full(k, 1.0 / k)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (k,):
        raise InvalidInputError(f"expected {k} weights, got shape {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)) or abs(w.sum() - 1.0) > SUM_TOL:
        raise InvalidInputError("weights must be finite, nonnegative and sum to 1")
    return w


def mixture(members: Sequence, weights=None) -> np.ndarray:
    """Convex combination of member distributions (uniform by default)."""
    stack = _check_family(members, 1)
    w = _check_weights(weights, len(stack))
    if weights is None:
        # offsets from the column minimum, summed in sorted order: exact
        # invariance to member order, and identical members return exactly p
        low = stack.min(axis=0)
        return low + np.sort(stack - low, axis=0).sum(axis=0) / len(stack)
    return w @ stack


def jsd(members: Sequence, weights=None) -> float:
    """Generalized Jensen-Shannon divergence: weighted mean of KL(q_k || mixture)."""
    stack = _check_family(members, 2)
    w = _check_weights(weights, len(stack))
    mix = mixture(stack, weights)
    return math.fsum(wk * float(np.sum(_xlogy_terms(row, mix))) for wk, row in zip(w, stack) if wk > 0)
