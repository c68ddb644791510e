import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from drafteu.datagen import (
    CorpusRecord,
    GeneratedCorpus,
    content_tokens,
    generate_corpus,
    label_correctness,
    load_corpus,
    load_dataset,
    load_labels,
    make_synthetic_qa,
    partition_corpus,
    raw_task_corpus,
    save_corpus,
    save_dataset,
    save_labels,
)
from drafteu.errors import InvalidInputError
from drafteu.models import LINEAR_SOFTMAX, TABULAR, LowRankNoiseSpec, VocabSpec, init_model, make_target_family

VOCAB = VocabSpec(8)


def oracle_model(data):
    """Tabular model that answers every query with its gold token, then eos."""
    n = len(data.query(0))
    base = init_model(TABULAR, data.vocab, n)
    params = base.params.copy().reshape(-1, data.vocab.size)
    V = data.vocab.size

    def row(ctx):
        enc = base.encode_context(ctx)
        return int(sum(t * V ** (n - 1 - i) for i, t in enumerate(enc)))

    for i in range(len(data)):
        q = data.query(i)
        params[row(q)] = -40.0
        params[row(q), data.gold(i)] = 40.0
        params[row(q + (data.gold(i),))] = -40.0
        params[row(q + (data.gold(i),)), data.vocab.eos_id] = 40.0
    return base.with_params(params.ravel())


def tiny_corpus(n_records):
    recs = tuple(CorpusRecord(i // 2, i % 2, (3,), (4, 1), "model") for i in range(n_records))
    return GeneratedCorpus(recs, 2)


def test_dataset_deterministic_and_distinct():
    a = make_synthetic_qa(VOCAB, 40, 3, 7)
    assert a == make_synthetic_qa(VOCAB, 40, 3, 7)
    assert len({a.query(i) for i in range(len(a))}) == 40
    alphabet = set(content_tokens(VOCAB).tolist())
    assert all(a.gold(i) in alphabet and set(a.query(i)[:-1]) <= alphabet for i in range(len(a)))
    assert make_synthetic_qa(VOCAB, 40, 3, 8) != a


def test_dataset_infeasible_count():
    with pytest.raises(InvalidInputError):
        make_synthetic_qa(VOCAB, 26, 2, 0)  # only 5^2 = 25 keys


def test_gold_answers_uniform_over_alphabet():
    # 10 queries per answer symbol
    alphabet = content_tokens(VOCAB)
    data = make_synthetic_qa(VOCAB, 10 * len(alphabet), 3, 2024)
    counts = np.array([sum(data.gold(i) == a for i in range(len(data))) for a in alphabet])
    assert chisquare(counts).pvalue > 0.01


def test_generate_corpus_counts_and_greedy():
    data = make_synthetic_qa(VOCAB, 6, 2, 1)
    model = init_model(LINEAR_SOFTMAX, VOCAB, 3, 4, 1.0, 3)
    corpus = generate_corpus(model, data, 4, 1.0, 5)
    assert len(corpus) == len(data) * 4
    for qi in range(len(data)):
        assert sum(r.query_index == qi for r in corpus.records) == 4
    greedy = generate_corpus(model, data, 4, 0.0, 5)
    for qi in range(len(data)):
        assert len({r.response for r in greedy.records if r.query_index == qi}) == 1
    assert generate_corpus(model, data, 4, 1.0, 5) == corpus


def test_family_teacher_member_usage_uniform():
    data = make_synthetic_qa(VOCAB, 25, 2, 1)
    base = init_model(LINEAR_SOFTMAX, VOCAB, 3, 2, 0.5, 3)
    fam = make_target_family(base, 3, LowRankNoiseSpec(1, 0.3), 4)
    corpus = generate_corpus(fam, data, 400, 1.0, 9, max_len=1)
    counts = np.array([sum(r.teacher_tag == f"family[{k}]" for r in corpus.records) for k in range(3)])
    n = counts.sum()
    assert n == 10_000
    sd = np.sqrt(n * (1 / 3) * (2 / 3))
    assert np.all(np.abs(counts - n / 3) <= 3 * sd)


def test_partition_examples():
    c = tiny_corpus(10)
    assert partition_corpus(c, 1, 0).chunk(0) == list(range(10))
    assert sorted(partition_corpus(c, 3, 0).sizes()) == [3, 3, 4]
    with pytest.raises(InvalidInputError):
        partition_corpus(c, 11, 0)
    with pytest.raises(InvalidInputError):
        partition_corpus(c, 0, 0)


def test_partition_disjoint_exhaustive_balanced_random_pairs():
    gen = np.random.default_rng(0)
    for _ in range(1000):
        n = int(gen.integers(1, 60))
        s = int(gen.integers(1, n + 1))
        plan = partition_corpus(tiny_corpus(n), s, int(gen.integers(2**63)))
        chunks = [plan.chunk(i) for i in range(s)]
        flat = sorted(r for ch in chunks for r in ch)
        assert flat == list(range(n))
        sizes = plan.sizes()
        assert max(sizes) - min(sizes) <= 1


@given(st.integers(1, 12), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**63))
def test_query_stratified_partition(n_queries, r, s, seed):
    recs = tuple(CorpusRecord(q, j, (3,), (4,), "model") for q in range(n_queries) for j in range(r))
    corpus = GeneratedCorpus(recs, r)
    if s > len(recs):
        return
    plan = partition_corpus(corpus, s, seed, by_query=True)
    sizes = plan.sizes()
    assert max(sizes) - min(sizes) <= 1
    for q in range(n_queries):
        per_chunk = [sum(1 for i in plan.chunk(c) if recs[i].query_index == q) for c in range(s)]
        assert max(per_chunk) - min(per_chunk) <= 1


def test_labels_oracle_uniform_and_deterministic():
    data = make_synthetic_qa(VOCAB, 20, 2, 3)
    oracle = oracle_model(data)
    labels = label_correctness(oracle, data, 3, 1.0, 0)
    assert len(labels) == 60 and all(s.label == 1 for s in labels)
    uniform = init_model(LINEAR_SOFTMAX, VOCAB, 3)
    many = label_correctness(uniform, data, 500, 1.0, 1, max_len=1)
    acc = np.mean([s.label for s in many])
    se = np.sqrt((1 / 8) * (7 / 8) / len(many))
    assert abs(acc - 1 / 8) <= 3 * se
    assert label_correctness(uniform, data, 2, 1.0, 4) == label_correctness(uniform, data, 2, 1.0, 4)


def test_raw_task_corpus():
    data = make_synthetic_qa(VOCAB, 5, 2, 3)
    raw = raw_task_corpus(data, [1, 3])
    assert [r.query_index for r in raw.records] == [1, 3]
    assert raw.records[0].response == (data.gold(1), VOCAB.eos_id)


def test_file_roundtrips(tmp_path):
    data = make_synthetic_qa(VOCAB, 5, 2, 3)
    assert load_dataset(save_dataset(data, tmp_path / "d.jsonl")) == data
    corpus = generate_corpus(init_model(LINEAR_SOFTMAX, VOCAB, 3, 2, 1.0, 1), data, 2, 1.0, 0)
    assert load_corpus(save_corpus(corpus, tmp_path / "c.jsonl")) == corpus
    labels = label_correctness(oracle_model(data), data, 2, 1.0, 0)
    assert load_labels(save_labels(labels, tmp_path / "l.jsonl")) == labels
    with pytest.raises(InvalidInputError):
        load_corpus(tmp_path / "d.jsonl")
