import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drafteu import rng
from drafteu.errors import InvalidInputError
from drafteu.estimators import ground_truth_eu
from drafteu.models import (
    LINEAR_SOFTMAX,
    TABULAR,
    TARGET_FAMILY,
    AutoregressiveModel,
    LowRankNoiseSpec,
    ModelFamily,
    VocabSpec,
    init_model,
    make_target_family,
    next_token_dist,
    perturb_low_rank,
    predictive_average,
    sample_sequence,
)
from drafteu.simplex import mixture

VOCAB = VocabSpec(5)


def tabular_with_row(vocab, n, context, row):
    m = init_model(TABULAR, vocab, n)
    params = m.params.copy()
    enc = m.encode_context(context)
    idx = int(sum(t * vocab.size ** (n - 1 - i) for i, t in enumerate(enc)))
    params[idx * vocab.size : (idx + 1) * vocab.size] = row
    return m.with_params(params)


def test_param_counts():
    assert init_model(TABULAR, VOCAB, 2).params.size == 5**2 * 5
    assert init_model(LINEAR_SOFTMAX, VOCAB, 3).params.size == 3 * 5 * 5
    assert init_model(LINEAR_SOFTMAX, VOCAB, 3, 7).params.size == 3 * 5 * 7 + 7 * 5


def test_invalid_models():
    with pytest.raises(InvalidInputError):
        VocabSpec(1)
    with pytest.raises(InvalidInputError):
        VocabSpec(4, 1, 1)
    with pytest.raises(InvalidInputError):
        AutoregressiveModel(TABULAR, 1, np.zeros(3), VOCAB)
    with pytest.raises(InvalidInputError):
        AutoregressiveModel(LINEAR_SOFTMAX, 1, np.full(25, np.nan), VOCAB)


def test_zero_models_are_uniform():
    for m in (init_model(TABULAR, VOCAB, 2), init_model(LINEAR_SOFTMAX, VOCAB, 2, 4)):
        np.testing.assert_allclose(next_token_dist(m, [2, 3]), np.full(5, 0.2), rtol=1e-15)


def test_tabular_row_softmax():
    v = VocabSpec(2, 0, 1)
    m = tabular_with_row(v, 1, [1], [math.log(2), 0.0])
    np.testing.assert_allclose(next_token_dist(m, [1]), [2 / 3, 1 / 3], rtol=1e-15)


def test_context_padding_and_range():
    m = init_model(LINEAR_SOFTMAX, VOCAB, 3, 0, 0.5, seed=1)
    np.testing.assert_array_equal(next_token_dist(m, [2]), next_token_dist(m, [0, 0, 2]))
    np.testing.assert_array_equal(next_token_dist(m, [4, 4, 1, 2, 3]), next_token_dist(m, [1, 2, 3]))
    with pytest.raises(InvalidInputError):
        next_token_dist(m, [5])


@given(st.integers(0, 2**32), st.lists(st.integers(0, 4), max_size=6))
def test_next_token_dist_is_categorical(seed, ctx):
    m = init_model(LINEAR_SOFTMAX, VOCAB, 3, 4, 3.0, seed=seed)
    p = next_token_dist(m, ctx)
    assert np.all(p > 0) and abs(p.sum() - 1) < 1e-12


def test_perturb_sigma_zero_and_determinism():
    m = init_model(LINEAR_SOFTMAX, VOCAB, 2, 4, 0.5, seed=3)
    same = perturb_low_rank(m, LowRankNoiseSpec(2, 0.0), 9)
    np.testing.assert_array_equal(same.params, m.params)
    noise = LowRankNoiseSpec(2, 0.3)
    a, b = perturb_low_rank(m, noise, 9), perturb_low_rank(m, noise, 9)
    np.testing.assert_array_equal(a.params, b.params)
    assert not np.array_equal(a.params, m.params)


def test_perturb_does_not_mutate_input():
    m = init_model(LINEAR_SOFTMAX, VOCAB, 2, 4, 0.5, seed=3)
    before = m.params.copy()
    perturb_low_rank(m, LowRankNoiseSpec(1, 1.0), 1)
    np.testing.assert_array_equal(m.params, before)
    assert not m.params.flags.writeable


def test_perturb_rank_too_large():
    m = init_model(LINEAR_SOFTMAX, VOCAB, 1, 2)
    with pytest.raises(InvalidInputError):
        perturb_low_rank(m, LowRankNoiseSpec(3, 0.1), 0)
    with pytest.raises(InvalidInputError):
        perturb_low_rank(m, LowRankNoiseSpec(1, 0.1, ("nope",)), 0)


def test_perturb_frobenius_matches_construction():
    # E||(1/sqrt r) A B^T||_F^2 = d1 d2 sigma^4 for iid N(0, sigma^2) factors
    v = VocabSpec(4)
    m = init_model(LINEAR_SOFTMAX, v, 2)  # single w_out block of shape (8, 4)
    sigma, r = 0.7, 3
    noise = LowRankNoiseSpec(r, sigma)
    sq = [float(np.sum(perturb_low_rank(m, noise, s).params ** 2)) for s in range(10_000)]
    expected = 8 * 4 * sigma**4
    assert abs(np.mean(sq) - expected) / expected < 0.05


def test_target_family_examples():
    base = init_model(LINEAR_SOFTMAX, VOCAB, 2, 4, 0.5, seed=5)
    single = make_target_family(base, 1, LowRankNoiseSpec(1, 0.0), 0)
    assert len(single) == 1 and single.provenance == TARGET_FAMILY
    np.testing.assert_array_equal(single[0].params, base.params)
    fam = make_target_family(base, 3, LowRankNoiseSpec(2, 0.5), 0)
    for i in range(3):
        for j in range(i + 1, 3):
            assert not np.array_equal(fam[i].params, fam[j].params)
    flat = make_target_family(base, 3, LowRankNoiseSpec(2, 0.0), 0)
    assert ground_truth_eu(flat, [1, 2]) == 0.0
    # member i is perturbed with derive(seed, i)
    np.testing.assert_array_equal(fam[1].params, perturb_low_rank(base, LowRankNoiseSpec(2, 0.5), rng.derive(0, 1)).params)


def test_predictive_average_examples():
    v = VocabSpec(2, 0, 1)
    a = tabular_with_row(v, 1, [1], [40.0, -40.0])
    b = tabular_with_row(v, 1, [1], [-40.0, 40.0])
    np.testing.assert_allclose(predictive_average(ModelFamily((a, b)), [1]), [0.5, 0.5], atol=1e-15)
    np.testing.assert_array_equal(predictive_average(ModelFamily((a, a)), [1]), next_token_dist(a, [1]))
    fam = make_target_family(init_model(LINEAR_SOFTMAX, VOCAB, 2, 3, 0.5, 1), 4, LowRankNoiseSpec(1, 1.0), 2)
    dists = [next_token_dist(m, [3]) for m in fam]
    avg = predictive_average(fam, [3])
    np.testing.assert_array_equal(avg, mixture(dists))
    assert np.all(avg >= np.min(dists, axis=0)) and np.all(avg <= np.max(dists, axis=0))


def test_sampling_greedy_and_deterministic():
    v = VocabSpec(3, 0, 1)
    m = tabular_with_row(v, 1, [2], [0.0, 0.0, 0.0])
    # uniform row: greedy tie goes to the lowest index, which is bos (not eos) so it continues
    out = sample_sequence(m, [2], 3, 0.0, seed=0)
    assert out[0] == 0
    m2 = init_model(LINEAR_SOFTMAX, VOCAB, 2, 3, 1.0, 4)
    assert sample_sequence(m2, [2], 6, 1.0, 11) == sample_sequence(m2, [2], 6, 1.0, 11)


def test_sampling_frequencies_match_distribution():
    m = init_model(LINEAR_SOFTMAX, VocabSpec(6, 0, None), 1, 0, 1.0, 8)
    p = next_token_dist(m, [3])
    counts = np.zeros(6)
    for s in range(100_000):
        counts[sample_sequence(m, [3], 1, 1.0, s)[0]] += 1
    assert 0.5 * np.abs(counts / counts.sum() - p).sum() < 0.01


def test_sampling_stops_at_eos():
    v = VocabSpec(3, 0, 1)
    m = tabular_with_row(v, 1, [2], [-40.0, 40.0, -40.0])
    assert sample_sequence(m, [2], 5, 1.0, 0) == [1]
