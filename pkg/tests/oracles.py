"""Small shared oracles for the test suite."""

import math

import numpy as np

from drafteu.distillation import discretized_gaussian
from drafteu.evaluation import detection_metrics, fit_logistic

BIMODAL_V = 24
GRID_LOCS = np.linspace(0, BIMODAL_V - 1, 93)
GRID_LOG_SCALES = np.linspace(-1.0, 2.5, 36)


def bimodal_teacher(V=BIMODAL_V):
    return 0.5 * discretized_gaussian(5.0, math.log(1.5), V) + 0.5 * discretized_gaussian(18.0, math.log(1.5), V)


def bump_masses(q):
    half = q.size // 2
    return float(q[:half].sum()), float(q[half:].sum())


def threshold_detection_auroc(n=2000, noise=0.02, threshold=0.3, seed=0):
    """Label = 1 iff true EU exceeds a threshold; scores are noisy true EU."""
    gen = np.random.default_rng(seed)
    true_eu = gen.uniform(0.0, math.log(2), n)
    labels = (true_eu > threshold).astype(float)
    est = true_eu + noise * gen.standard_normal(n)
    model = fit_logistic(est, labels)
    return detection_metrics(model.predict(est), labels)["auroc"]
