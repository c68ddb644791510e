import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drafteu.errors import InvalidInputError, UndefinedCorrelationError, UndefinedMetricError
from drafteu.evaluation import (
    DRAFTS_ONLY,
    DRAFTS_PLUS_TARGET,
    CostEntry,
    auroc,
    brier,
    calibration_split,
    ccc,
    detection_metrics,
    draft_method_cost,
    ece,
    fit_logistic,
    relative_flops,
    rmse,
    spearman,
    summarize,
)
from oracles import threshold_detection_auroc

floats = st.lists(st.floats(-100, 100, allow_nan=False), min_size=3, max_size=30)


def test_rmse_examples():
    x = [0.1, 0.4, 0.9]
    assert rmse(x, x) == 0.0
    assert rmse(np.array(x) + 0.5, x) == pytest.approx(0.5, abs=1e-15)
    assert rmse([0, 1], [1, 0]) == 1.0
    with pytest.raises(InvalidInputError):
        rmse([1, 2], [1])


def test_spearman_examples():
    assert spearman([1, 2, 3], [10, 20, 30]) == 1.0
    assert spearman([1, 2, 3], [3, 2, 1]) == -1.0
    assert spearman([1, 1, 2], [1, 2, 3]) == pytest.approx(math.sqrt(3) / 2, abs=1e-15)
    with pytest.raises(UndefinedCorrelationError):
        spearman([1, 1, 1], [1, 2, 3])


def test_ccc_examples():
    x = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
    assert ccc(x, x) == pytest.approx(1.0, abs=1e-15)
    c = 0.7
    var = np.var(x)
    assert ccc(x, x + c) == pytest.approx(2 * var / (2 * var + c**2), abs=1e-15)
    assert ccc(x, -x + 2 * x.mean()) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(UndefinedCorrelationError):
        ccc([1, 1], [2, 2])


def test_logistic_separable_and_deterministic():
    s = np.array([0.0, 0.1, 0.2, 0.8, 0.9, 1.0])
    y = np.array([0, 0, 0, 1, 1, 1])
    model = fit_logistic(s, y)
    assert math.isfinite(model.slope) and math.isfinite(model.intercept)
    assert auroc(model.predict(s), y) == 1.0
    assert fit_logistic(s, y) == model
    with pytest.raises(InvalidInputError):
        fit_logistic(s, np.ones(6))


def test_logistic_independent_labels_against_grid_oracle():
    # balanced labels with identical score distribution in both classes
    s = np.tile(np.linspace(0, 1, 50), 2)
    y = np.repeat([0.0, 1.0], 50)
    model = fit_logistic(s, y)
    assert np.all(np.abs(model.predict(s) - 0.5) <= 0.01)
    slopes, intercepts = np.linspace(-1, 1, 201), np.linspace(-1, 1, 201)
    best = min(((np.mean(np.logaddexp(0, a * s + b) - y * (a * s + b)) + 0.5e-3 * a * a, a, b)
                for a in slopes for b in intercepts))
    assert abs(model.slope - best[1]) <= 0.01 and abs(model.intercept - best[2]) <= 0.01


def test_detection_examples():
    y = np.array([0, 0, 1, 1])
    assert auroc([0.1, 0.2, 0.8, 0.9], y) == 1.0
    assert auroc([0.9, 0.8, 0.2, 0.1], y) == 0.0
    assert auroc([0.5, 0.5, 0.5, 0.5], y) == 0.5
    m = detection_metrics([0.5] * 4, y)
    assert m["brier"] == 0.25 and m["ece"] == 0.0
    single = detection_metrics([0.2, 0.3], [1, 1])
    assert single["auroc"] is None and single["brier"] == pytest.approx(0.565)
    with pytest.raises(UndefinedMetricError):
        auroc([0.2, 0.3], [1, 1])
    with pytest.raises(InvalidInputError):
        detection_metrics([1.5, 0.2], [0, 1])


def test_ece_hand_computed():
    p = [0.05, 0.15, 0.95, 0.95]
    y = [0, 1, 1, 0]
    # bins: {0.05}->|0-0.05|, {0.15}->|1-0.15|, {0.95,0.95}->|0.5-0.95|
    expected = 0.25 * 0.05 + 0.25 * 0.85 + 0.5 * 0.45
    assert ece(p, y) == pytest.approx(expected, abs=1e-15)
    assert brier([1.0, 0.0], [1, 0]) == 0.0


def test_cost_examples():
    baseline = CostEntry("target family", ((8, 3),))
    assert baseline.total == 24
    assert relative_flops(baseline, baseline) == 1.00
    assert relative_flops(draft_method_cost("1B drafts", 6, 1, 8, DRAFTS_PLUS_TARGET), baseline) == 0.58
    assert relative_flops(draft_method_cost("3B drafts", 6, 3, 8, DRAFTS_PLUS_TARGET), baseline) == 1.08
    assert relative_flops(draft_method_cost("3B drafts", 6, 3, 8, DRAFTS_ONLY), baseline) == 0.75
    with pytest.raises(InvalidInputError):
        draft_method_cost("x", 6, 3, 8, "free")
    with pytest.raises(InvalidInputError):
        CostEntry("empty", ())


@given(floats, st.floats(0.1, 10), st.floats(-10, 10))
def test_rmse_homogeneous(x, a, c):
    x = np.array(x)
    y = x[::-1].copy()
    assert abs(rmse(a * x + c, a * y + c) - a * rmse(x, y)) <= 1e-12 * max(1.0, a * np.abs(x).max())


@given(st.lists(st.integers(-50, 50), min_size=3, max_size=30, unique=True), st.integers(0, 2**32))
def test_spearman_monotone_invariance(x, seed):
    x = np.array(x) / 10
    y = np.random.default_rng(seed).permutation(x.size).astype(float)
    r = spearman(x, y)
    assert spearman(np.exp(x), y) == r
    assert spearman(x, 3 * y + 1) == r


@given(st.lists(st.floats(0.01, 0.99), min_size=4, max_size=40), st.integers(0, 2**32))
def test_auroc_monotone_invariance_and_brier_bound(p, seed):
    p = np.array(p)
    y = np.random.default_rng(seed).integers(0, 2, p.size).astype(float)
    if y.min() == y.max():
        return
    assert auroc(p, y) == auroc(p**3, y)
    model = fit_logistic(p, y, reg=1e-9)
    assert brier(model.predict(p), y) <= brier(np.full(p.size, y.mean()), y) + 1e-9


def test_threshold_pipeline_detects():
    assert threshold_detection_auroc() >= 0.95


def test_calibration_split_and_summary():
    a, b = calibration_split(range(11), 3)
    assert a.isdisjoint(b) and a | b == set(range(11)) and len(a) == 5
    assert calibration_split(range(11), 3) == (a, b)
    s = summarize([1.0, 2.0, 3.0])
    assert s == {"mean": 2.0, "std": 1.0}
    assert summarize([4.0])["std"] == 0.0
