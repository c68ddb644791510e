"""Fidelity metrics, hallucination-detection metrics and the FLOPs cost model."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from drafteu import rng as rng_mod
from drafteu.errors import InvalidInputError, UndefinedCorrelationError, UndefinedMetricError

DEFAULT_BINS = 10


def _pair(x, y, min_len: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise InvalidInputError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < min_len:
        raise InvalidInputError(f"need at least {min_len} values")
    return x, y


def rmse(est, gt) -> float:
    est, gt = _pair(est, gt)
    return math.sqrt(float(np.mean((est - gt) ** 2)))


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(np.dot(dx, dx)), float(np.dot(dy, dy))
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation undefined for zero variance")
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    x, y = _pair(x, y, 2)
    return _pearson(rankdata(x), rankdata(y))


def ccc(x, y) -> float:
    """Lin's concordance correlation coefficient with population moments."""
    x, y = _pair(x, y, 2)
    vx, vy = float(np.var(x)), float(np.var(y))
    if vx == 0 and vy == 0:
        raise UndefinedCorrelationError("CCC undefined when both variances are zero")
    cov = float(np.mean((x - x.mean()) * (y - y.mean())))
    return 2 * cov / (vx + vy + (float(x.mean()) - float(y.mean())) ** 2)


# -- logistic calibration -----------------------------------------------------


def _sigmoid(z):
    return np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))


@dataclass(frozen=True)
class CalibrationModel:
    slope: float
    intercept: float
    regularization: float

    def predict(self, scores) -> np.ndarray:
        return _sigmoid(self.slope * np.asarray(scores, dtype=np.float64) + self.intercept)


def _objective(w, s, y, reg):
    z = w[0] * s + w[1]
    # mean negative log-likelihood, stable form
    nll = np.mean(np.logaddexp(0, z) - y * z)
    return float(nll + 0.5 * reg * w[0] ** 2)


def fit_logistic(scores, labels, reg: float = 1e-3, max_iter: int = 200, tol: float = 1e-8) -> CalibrationModel:
    """L2-regularized logistic regression of labels on one score (slope penalized).

    Damped Newton iterations until the gradient norm is at most ``tol``.
    """
    s, y = _pair(scores, labels)
    if reg < 0:
        raise InvalidInputError("regularization must be nonnegative")
    if not set(np.unique(y)) <= {0.0, 1.0}:
        raise InvalidInputError("labels must be 0/1")
    if y.min() == y.max():
        raise InvalidInputError("logistic calibration needs both classes")
    n = y.size
    w = np.array([0.0, math.log(y.mean() / (1 - y.mean()))])
    X = np.stack([s, np.ones(n)], axis=1)
    for _ in range(max_iter):
        p = _sigmoid(X @ w)
        grad = X.T @ (p - y) / n + np.array([reg * w[0], 0.0])
        if np.linalg.norm(grad) <= tol:
            break
        hess = (X.T * (p * (1 - p))) @ X / n + np.diag([reg, 0.0])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = grad
        f0, t = _objective(w, s, y, reg), 1.0
        while t > 1e-12 and _objective(w - t * step, s, y, reg) > f0 - 1e-4 * t * float(grad @ step):
            t *= 0.5
        w = w - t * step
    return CalibrationModel(float(w[0]), float(w[1]), reg)


# -- detection metrics ------------------------------------------------------


def auroc(probs, labels) -> float:
    """Mann-Whitney AUROC; tied scores count 1/2."""
    p, y = _pair(probs, labels)
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    ranks = rankdata(p)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def ece(probs, labels, n_bins: int = DEFAULT_BINS) -> float:
    """Expected calibration error of positive-class probabilities, equal-width bins."""
    p, y = _pair(probs, labels)
    if n_bins < 1:
        raise InvalidInputError("n_bins must be >= 1")
    bins = np.minimum((p * n_bins).astype(np.int64), n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        mask = bins == b
        if mask.any():
            total += mask.sum() / p.size * abs(float(y[mask].mean()) - float(p[mask].mean()))
    return float(total)


def brier(probs, labels) -> float:
    p, y = _pair(probs, labels)
    return float(np.mean((p - y) ** 2))


def detection_metrics(probs, labels, n_bins: int = DEFAULT_BINS) -> Dict[str, Optional[float]]:
    """AUROC, ECE and Brier. AUROC is None when only one class is present."""
    p, y = _pair(probs, labels)
    if np.any((p < 0) | (p > 1)):
        raise InvalidInputError("probabilities must lie in [0, 1]")
    try:
        a = auroc(p, y)
    except UndefinedMetricError:
        a = None
    return {"auroc": a, "ece": ece(p, y, n_bins), "brier": brier(p, y)}


def calibration_split(query_ids: Sequence[int], seed: int) -> Tuple[set, set]:
    """Deterministic 50/50 split of query ids ordered by a seeded hash."""
    uniq = sorted(set(int(q) for q in query_ids), key=lambda q: (rng_mod.derive(seed, q), q))
    half = len(uniq) // 2
    return set(uniq[:half]), set(uniq[half:])


# -- cost model -------------------------------------------------------------

DRAFTS_ONLY = "drafts-only"
DRAFTS_PLUS_TARGET = "drafts-plus-target"
COST_MODES = (DRAFTS_ONLY, DRAFTS_PLUS_TARGET)


@dataclass(frozen=True)
class CostEntry:
    """Forward passes of one method as (model size units, count) pairs."""

    label: str
    passes: Tuple[Tuple[float, int], ...]

    def __post_init__(self):
        passes = tuple((float(s), int(c)) for s, c in self.passes)
        if not passes:
            raise InvalidInputError("cost entry needs at least one pass")
        if any(s <= 0 or c < 0 for s, c in passes):
            raise InvalidInputError("pass sizes must be positive and counts nonnegative")
        object.__setattr__(self, "passes", passes)

    @property
    def total(self) -> float:
        return math.fsum(s * c for s, c in self.passes)


def relative_flops(method: CostEntry, baseline: CostEntry) -> float:
    """Cost ratio rounded to two decimals."""
    if baseline.total <= 0:
        raise InvalidInputError("baseline cost must be positive")
    return round(method.total / baseline.total, 2)


def draft_method_cost(label: str, n_drafts: int, draft_size: float, target_size: float, mode: str) -> CostEntry:
    """Cost of a draft-ensemble estimator: drafts plus, optionally, one target-sized pass."""
    if mode not in COST_MODES:
        raise InvalidInputError(f"unknown cost mode {mode!r}")
    passes = [(draft_size, n_drafts)]
    if mode == DRAFTS_PLUS_TARGET:
        passes.append((target_size, 1))
    return CostEntry(label, tuple(passes))


def summarize(values: Sequence[float]) -> Dict[str, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std}
