"""Synthetic key-to-answer task, teacher-generated corpora and partitions.

Token layout: ``bos=0``, ``eos=1``, ``sep=2``; every other id is a content
token. A query is ``key + [sep]`` and a response starts with the answer
token, so correctness is read off ``response[0]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from drafteu import io
from drafteu import rng as rng_mod
from drafteu.errors import InvalidInputError
from drafteu.models import AutoregressiveModel, ModelFamily, VocabSpec, sample_sequence

SEP_ID = 2
DEFAULT_MAX_LEN = 8


def content_tokens(vocab: VocabSpec, sep_id: int = SEP_ID) -> np.ndarray:
    special = {vocab.bos_id, sep_id}
    if vocab.eos_id is not None:
        special.add(vocab.eos_id)
    return np.array([t for t in range(vocab.size) if t not in special], dtype=np.int64)


@dataclass(frozen=True)
class QADataset:
    vocab: VocabSpec
    items: Tuple[Tuple[Tuple[int, ...], int], ...]
    task_seed: int
    sep_id: int = SEP_ID

    def __len__(self) -> int:
        return len(self.items)

    def query(self, i: int) -> Tuple[int, ...]:
        return self.items[i][0]

    def gold(self, i: int) -> int:
        return self.items[i][1]

    def task_sequences(self, indices: Optional[Sequence[int]] = None) -> List[Tuple[Tuple[int, ...], Tuple[int, ...]]]:
        """Raw (prompt, response) pairs answering each query with its gold token."""
        idx = range(len(self)) if indices is None else indices
        eos = [] if self.vocab.eos_id is None else [self.vocab.eos_id]
        return [(self.query(i), tuple([self.gold(i)] + eos)) for i in idx]


def make_synthetic_qa(vocab: VocabSpec, n_queries: int, key_len: int, seed: int, sep_id: int = SEP_ID) -> QADataset:
    """Draw ``n_queries`` distinct random keys and hash each to a gold answer.

    Keys and answers use content tokens only.
    """
    alphabet = content_tokens(vocab, sep_id)
    a = len(alphabet)
    if key_len < 1 or a < 2:
        raise InvalidInputError("need key_len >= 1 and at least two content tokens")
    total = a**key_len
    if not 1 <= n_queries <= total:
        raise InvalidInputError(f"cannot draw {n_queries} distinct keys from {total}")
    gen = rng_mod.stream(seed, 0)
    if total <= 1 << 20:
        codes = gen.choice(total, size=n_queries, replace=False)
    else:
        seen, codes = set(), []
        while len(codes) < n_queries:
            c = int(gen.integers(total))
            if c not in seen:
                seen.add(c)
                codes.append(c)
    items = []
    for code in codes:
        digits = []
        c = int(code)
        for _ in range(key_len):
            digits.append(int(alphabet[c % a]))
            c //= a
        key = tuple(reversed(digits))
        gold = int(alphabet[rng_mod.derive(seed, 1, *key) % a])
        items.append((key + (sep_id,), gold))
    return QADataset(vocab, tuple(items), seed, sep_id)


@dataclass(frozen=True)
class CorpusRecord:
    query_index: int
    replica: int
    prompt: Tuple[int, ...]
    response: Tuple[int, ...]
    teacher_tag: str


@dataclass(frozen=True)
class GeneratedCorpus:
    records: Tuple[CorpusRecord, ...]
    responses_per_query: int

    def __len__(self) -> int:
        return len(self.records)


def generate_corpus(
    teacher: Union[AutoregressiveModel, ModelFamily],
    data: QADataset,
    r: int,
    temperature: float,
    seed: int,
    query_indices: Optional[Sequence[int]] = None,
    max_len: int = DEFAULT_MAX_LEN,
) -> GeneratedCorpus:
    """Sample ``r`` responses per query from the teacher.

    A ``ModelFamily`` teacher picks a member uniformly at random for each
    response. Records are ordered by (query_index, replica).
    """
    if r < 1:
        raise InvalidInputError("responses per query must be >= 1")
    indices = range(len(data)) if query_indices is None else query_indices
    records = []
    for qi in indices:
        for j in range(r):
            s = rng_mod.derive(seed, qi, j)
            if isinstance(teacher, ModelFamily):
                k = int(rng_mod.stream(s, 0).integers(len(teacher)))
                model, tag = teacher[k], f"family[{k}]"
            else:
                model, tag = teacher, "model"
            resp = sample_sequence(model, data.query(qi), max_len, temperature, rng_mod.derive(s, 1))
            records.append(CorpusRecord(int(qi), j, data.query(qi), tuple(resp), tag))
    return GeneratedCorpus(tuple(records), r)


def raw_task_corpus(data: QADataset, query_indices: Optional[Sequence[int]] = None) -> GeneratedCorpus:
    """Corpus of gold answers (no teacher involved), one record per query."""
    indices = range(len(data)) if query_indices is None else query_indices
    pairs = data.task_sequences(indices)
    recs = tuple(CorpusRecord(int(i), 0, prompt, resp, "raw") for i, (prompt, resp) in zip(indices, pairs))
    return GeneratedCorpus(recs, 1)


def merge_corpora(corpora: Sequence[GeneratedCorpus]) -> GeneratedCorpus:
    """Concatenate corpora in order (e.g. equal-proportion perturbation strata)."""
    if not corpora:
        raise InvalidInputError("nothing to merge")
    recs = tuple(r for c in corpora for r in c.records)
    return GeneratedCorpus(recs, sum(c.responses_per_query for c in corpora))


@dataclass(frozen=True)
class PartitionPlan:
    assignment: Tuple[int, ...]
    s: int

    def chunk(self, i: int) -> List[int]:
        return [rec for rec, c in enumerate(self.assignment) if c == i]

    def sizes(self) -> List[int]:
        return [sum(1 for c in self.assignment if c == i) for i in range(self.s)]


def partition_corpus(corpus: GeneratedCorpus, s: int, seed: int, by_query: bool = False) -> PartitionPlan:
    """Balanced random split of the records into ``s`` disjoint chunks.

    With ``by_query`` the records of each query are dealt across chunks in
    turn, so every chunk sees every query whenever ``R >= s``. Chunk sizes
    still differ by at most one.
    """
    n = len(corpus)
    if not 1 <= s <= n:
        raise InvalidInputError(f"partition count {s} outside [1, {n}]")
    gen = rng_mod.stream(seed)
    order = gen.permutation(n)
    if by_query:
        queries = sorted({r.query_index for r in corpus.records})
        rank = dict(zip(queries, gen.permutation(len(queries)).tolist()))
        slot = np.empty(n, dtype=np.int64)
        slot[order] = np.arange(n)
        order = np.array(sorted(range(n), key=lambda i: (rank[corpus.records[i].query_index], slot[i])), dtype=np.int64)
    assignment = np.empty(n, dtype=np.int64)
    assignment[order] = np.arange(n) % s
    return PartitionPlan(tuple(int(c) for c in assignment), s)


@dataclass(frozen=True)
class LabeledSample:
    query_index: int
    response: Tuple[int, ...]
    label: int
    run_id: int


def label_correctness(
    model: AutoregressiveModel,
    data: QADataset,
    samples_per_query: int,
    temperature: float,
    seed: int,
    query_indices: Optional[Sequence[int]] = None,
    max_len: int = DEFAULT_MAX_LEN,
) -> List[LabeledSample]:
    """Sample one answer per query per run; label 1 iff the answer is gold."""
    if samples_per_query < 1:
        raise InvalidInputError("samples_per_query must be >= 1")
    indices = range(len(data)) if query_indices is None else query_indices
    out = []
    for run in range(samples_per_query):
        for qi in indices:
            resp = sample_sequence(model, data.query(qi), max_len, temperature, rng_mod.derive(seed, run, qi))
            out.append(LabeledSample(int(qi), tuple(resp), int(resp[0] == data.gold(qi)), run))
    return out


# -- files ------------------------------------------------------------------


def save_dataset(data: QADataset, path) -> Path:
    head = {"kind": "qa_dataset", "V": data.vocab.size, "bos_id": data.vocab.bos_id,
            "eos_id": data.vocab.eos_id, "sep_id": data.sep_id, "task_seed": str(data.task_seed)}
    rows = [{"query_index": i, "query": list(q), "gold_answer": g} for i, (q, g) in enumerate(data.items)]
    return io.write_jsonl(path, [head] + rows)


def load_dataset(path) -> QADataset:
    head, *rows = io.read_jsonl(path)
    if head.get("kind") != "qa_dataset":
        raise InvalidInputError(f"{path} is not a dataset file")
    vocab = VocabSpec(head["V"], head["bos_id"], head["eos_id"])
    items = tuple((tuple(r["query"]), int(r["gold_answer"])) for r in rows)
    return QADataset(vocab, items, int(head["task_seed"]), head["sep_id"])


def save_corpus(corpus: GeneratedCorpus, path) -> Path:
    head = {"kind": "generated_corpus", "responses_per_query": corpus.responses_per_query}
    rows = [{"record": i, "query_index": r.query_index, "replica": r.replica, "prompt": list(r.prompt),
             "response": list(r.response), "teacher_tag": r.teacher_tag} for i, r in enumerate(corpus.records)]
    return io.write_jsonl(path, [head] + rows)


def load_corpus(path) -> GeneratedCorpus:
    head, *rows = io.read_jsonl(path)
    if head.get("kind") != "generated_corpus":
        raise InvalidInputError(f"{path} is not a corpus file")
    recs = tuple(CorpusRecord(r["query_index"], r["replica"], tuple(r["prompt"]), tuple(r["response"]), r["teacher_tag"])
                 for r in rows)
    return GeneratedCorpus(recs, head["responses_per_query"])


def save_labels(samples: Sequence[LabeledSample], path) -> Path:
    return io.write_jsonl(path, [{"query_index": s.query_index, "run_id": s.run_id,
                                  "response": list(s.response), "label": s.label} for s in samples])


def load_labels(path) -> List[LabeledSample]:
    return [LabeledSample(r["query_index"], tuple(r["response"]), r["label"], r["run_id"]) for r in io.read_jsonl(path)]
