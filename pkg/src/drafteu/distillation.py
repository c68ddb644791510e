"""Gradient-based distillation trainers.

All trainers run plain SGD with a constant learning rate on the response
positions of a corpus. The student's loss at a position is
``KL(target || student)`` where the target is one of

* the soft distribution of a fixed teacher model,
* the mean over freshly perturbed teacher realizations (online stochastic
  distillation; an ``EnumeratedTeacher`` uses every member every step), or
* the one-hot corpus token (``signal="samples"``), i.e. cross-entropy on the
  teacher's generations.

``reverse_kl_train`` instead minimizes ``KL(student || teacher)`` on contexts
sampled from the student itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from drafteu import rng as rng_mod
from drafteu.datagen import GeneratedCorpus, partition_corpus
from drafteu.errors import InvalidInputError, TrainingError
from drafteu.models import (
    DRAFT_FAMILY,
    AutoregressiveModel,
    LowRankNoiseSpec,
    ModelFamily,
    perturb_low_rank,
)
from drafteu.simplex import log_softmax_rows, softmax_rows

SOFT = "soft"
SAMPLES = "samples"

UNTRAINED = "untrained"
DDD = "ddd"
IDD = "idd"
FDD = "fdd"
REVERSE_KL = "reverse_kl"
STRATEGIES = (UNTRAINED, DDD, IDD, FDD, REVERSE_KL)

# stream ids
_ORDER, _TEACHER, _INIT, _PARTITION, _ONPOLICY = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.5
    steps: int = 500
    batch_size: int = 64
    teacher_samples_per_step: int = 2
    seed: int = 0
    signal: str = SOFT

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.steps > 0 and self.batch_size > 0 and self.teacher_samples_per_step > 0):
            raise InvalidInputError("train config values must be positive")
        if self.signal not in (SOFT, SAMPLES):
            raise InvalidInputError(f"unknown training signal {self.signal!r}")


@dataclass(frozen=True)
class StochasticTeacher:
    """Teacher whose parameters are re-drawn as ``base + low-rank noise``."""

    base: AutoregressiveModel
    noise: LowRankNoiseSpec

    def __post_init__(self):
        self.noise.target_blocks(self.base)

    def realizations(self, n: int, seed: int) -> List[AutoregressiveModel]:
        return [perturb_low_rank(self.base, self.noise, rng_mod.derive(seed, j)) for j in range(n)]


@dataclass(frozen=True)
class EnumeratedTeacher:
    """Finite teacher family whose expectation is computed exactly each step."""

    family: ModelFamily

    def realizations(self, n: int, seed: int) -> List[AutoregressiveModel]:
        return list(self.family.members)


@dataclass(frozen=True)
class CorpusTeacher:
    """Family that generated a corpus; each record is distilled from its own generator.

    Records tagged ``family[k]`` take member ``k``'s distribution as target.
    """

    family: ModelFamily


Teacher = Union[AutoregressiveModel, StochasticTeacher, EnumeratedTeacher, CorpusTeacher]


def _member_index(tag: str) -> int:
    if not (tag.startswith("family[") and tag.endswith("]")):
        raise InvalidInputError(f"record teacher tag {tag!r} does not name a family member")
    return int(tag[len("family[") : -1])


@dataclass
class TrainingRun:
    """A trained model plus its per-step log of (step, loss, record ids)."""

    model: AutoregressiveModel
    log: List[Dict] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [row["loss"] for row in self.log]

    def records_consumed(self) -> set:
        return {r for row in self.log for r in row["records"]}


@dataclass(frozen=True)
class Positions:
    """Flattened response positions: one context prefix and next token each."""

    prefixes: Tuple[Tuple[int, ...], ...]
    tokens: np.ndarray
    record_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.prefixes)


def response_positions(corpus: GeneratedCorpus, record_ids: Optional[Sequence[int]] = None) -> Positions:
    ids = range(len(corpus)) if record_ids is None else record_ids
    prefixes, tokens, recs = [], [], []
    for rid in ids:
        rec = corpus.records[rid]
        prefix = list(rec.prompt)
        for tok in rec.response:
            prefixes.append(tuple(prefix))
            tokens.append(tok)
            recs.append(rid)
            prefix.append(tok)
    return Positions(tuple(prefixes), np.array(tokens, dtype=np.int64), np.array(recs, dtype=np.int64))


def _kl_rows(target: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    # sum_i t_i (ln t_i - ln q_i), 0 ln 0 := 0
    safe = np.where(target > 0, target, 1.0)
    return np.sum(target * (np.log(safe) - log_q), axis=-1)


class _Batches:
    """Epoch-wise shuffled minibatches drawn from ``stream(seed, epoch)``."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.bs, self.seed = n, min(batch_size, n), seed
        self.epoch, self.perm, self.pos = 0, None, n

    def next(self) -> np.ndarray:
        if self.pos + self.bs > self.n:
            self.perm = rng_mod.stream(self.seed, self.epoch).permutation(self.n)
            self.epoch += 1
            self.pos = 0
        idx = self.perm[self.pos : self.pos + self.bs]
        self.pos += self.bs
        return idx


def _teacher_targets(teacher: Teacher, ctx: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Teacher distributions at ``ctx``, shape (realizations, B, V)."""
    if isinstance(teacher, AutoregressiveModel):
        models = [teacher]
    else:
        models = teacher.realizations(n, seed)
    return np.stack([softmax_rows(m.forward(ctx)[0]) for m in models])


def _check_compatible(student: AutoregressiveModel, teacher: Teacher):
    base = teacher
    if isinstance(teacher, StochasticTeacher):
        base = teacher.base
    elif isinstance(teacher, (EnumeratedTeacher, CorpusTeacher)):
        base = teacher.family[0]
    if base.vocab != student.vocab or base.context_window != student.context_window:
        raise InvalidInputError("student and teacher must share vocab and context window")


def distill(
    student: AutoregressiveModel,
    teacher: Optional[Teacher],
    corpus: GeneratedCorpus,
    config: TrainConfig,
    record_ids: Optional[Sequence[int]] = None,
) -> TrainingRun:
    """Forward-KL SGD of ``student`` on the corpus response positions.

    With ``config.signal == "samples"`` the corpus tokens are the targets and
    ``teacher`` may be None.
    """
    if config.signal == SOFT:
        if teacher is None:
            raise InvalidInputError("soft-target distillation needs a teacher")
        _check_compatible(student, teacher)
    pos = response_positions(corpus, record_ids)
    if len(pos) == 0:
        raise InvalidInputError("no training positions")
    ctx_all = student.encode_contexts(pos.prefixes)
    V = student.V
    if isinstance(teacher, CorpusTeacher) and config.signal == SOFT:
        owner = np.array([_member_index(corpus.records[r].teacher_tag) for r in pos.record_ids])
        member_p = np.stack([softmax_rows(m.forward(ctx_all)[0]) for m in teacher.family])
        per_position = member_p[owner, np.arange(len(pos))]
    params = student.params.copy()
    batches = _Batches(len(pos), config.batch_size, rng_mod.derive(config.seed, _ORDER))
    log = []
    for step in range(config.steps):
        idx = batches.next()
        ctx = ctx_all[idx]
        logits, cache = student.forward(ctx, params)
        log_q = log_softmax_rows(logits)
        q = np.exp(log_q)
        if config.signal == SAMPLES:
            targets = np.zeros((1, len(idx), V))
            targets[0, np.arange(len(idx)), pos.tokens[idx]] = 1.0
        elif isinstance(teacher, CorpusTeacher):
            targets = per_position[idx][None]
        else:
            tseed = rng_mod.derive(config.seed, _TEACHER, step)
            targets = _teacher_targets(teacher, ctx, config.teacher_samples_per_step, tseed)
        loss = float(np.mean(_kl_rows(targets, log_q[None])))
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}", step=step)
        grad = student.backward(cache, (q - targets.mean(axis=0)) / len(idx))
        params -= config.learning_rate * grad
        if not np.all(np.isfinite(params)):
            raise TrainingError(f"non-finite parameters after step {step}", step=step)
        log.append({"step": step, "loss": loss, "records": sorted(set(pos.record_ids[idx].tolist()))})
    return TrainingRun(student.with_params(params), log)


def osd_train(
    student: AutoregressiveModel,
    teacher: Union[StochasticTeacher, EnumeratedTeacher, AutoregressiveModel],
    corpus: GeneratedCorpus,
    config: TrainConfig,
    record_ids: Optional[Sequence[int]] = None,
) -> TrainingRun:
    """Online stochastic distillation: forward KL to freshly drawn teacher realizations.

    Each step draws ``config.teacher_samples_per_step`` perturbed teachers and
    descends on the mean of ``KL(p_teacher || p_student)`` over them, so the
    student's fixed point is the teacher family's pointwise mean.
    """
    return distill(student, teacher, corpus, replace(config, signal=SOFT), record_ids)


def _sample_batch(model: AutoregressiveModel, params: np.ndarray, prompts, max_len: int, gen) -> List[List[int]]:
    """Sample continuations for many prompts in lockstep (temperature 1)."""
    prefixes = [list(p) for p in prompts]
    outs: List[List[int]] = [[] for _ in prompts]
    alive = list(range(len(prompts)))
    eos = model.vocab.eos_id
    for _ in range(max_len):
        if not alive:
            break
        ctx = model.encode_contexts([prefixes[i] for i in alive])
        p = softmax_rows(model.forward(ctx, params)[0])
        cdf = np.cumsum(p, axis=1)
        u = gen.random(len(alive))[:, None] * cdf[:, -1:]
        toks = np.minimum((cdf <= u).sum(axis=1), p.shape[1] - 1)
        still = []
        for i, t in zip(alive, toks.tolist()):
            outs[i].append(t)
            prefixes[i].append(t)
            if t != eos:
                still.append(i)
        alive = still
    return outs


def reverse_kl_train(
    student: AutoregressiveModel,
    teacher: AutoregressiveModel,
    corpus: GeneratedCorpus,
    config: TrainConfig,
    max_len: int = 8,
) -> TrainingRun:
    """Mode-seeking baseline: minimize KL(student || teacher) on-policy.

    Each step samples one continuation per prompt in a batch of corpus prompts
    from the current student and descends on the mean reverse KL over the
    visited positions.
    """
    if not isinstance(teacher, AutoregressiveModel):
        raise InvalidInputError("reverse-KL training needs a single model as teacher")
    _check_compatible(student, teacher)
    prompts = sorted({rec.prompt for rec in corpus.records})
    prompt_records: Dict[Tuple[int, ...], List[int]] = {}
    for rid, rec in enumerate(corpus.records):
        prompt_records.setdefault(rec.prompt, []).append(rid)
    params = student.params.copy()
    batches = _Batches(len(prompts), config.batch_size, rng_mod.derive(config.seed, _ORDER))
    log = []
    for step in range(config.steps):
        idx = batches.next()
        batch_prompts = [prompts[i] for i in idx]
        gen = rng_mod.stream(config.seed, _ONPOLICY, step)
        conts = _sample_batch(student, params, batch_prompts, max_len, gen)
        prefixes = [tuple(p) + tuple(c[:t]) for p, c in zip(batch_prompts, conts) for t in range(len(c))]
        ctx = student.encode_contexts(prefixes)
        logits, cache = student.forward(ctx, params)
        log_q = log_softmax_rows(logits)
        q = np.exp(log_q)
        log_p = log_softmax_rows(teacher.forward(ctx)[0])
        diff = log_q - log_p
        row_kl = np.sum(q * diff, axis=1)
        loss = float(row_kl.mean())
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}", step=step)
        dlogits = q * (diff - row_kl[:, None]) / len(prefixes)
        params -= config.learning_rate * student.backward(cache, dlogits)
        if not np.all(np.isfinite(params)):
            raise TrainingError(f"non-finite parameters after step {step}", step=step)
        consumed = sorted({r for p in batch_prompts for r in prompt_records[p]})
        log.append({"step": step, "loss": loss, "records": consumed})
    return TrainingRun(student.with_params(params), log)


# -- draft families -----------------------------------------------------------


@dataclass(frozen=True)
class DraftStrategy:
    kind: str
    s: int = 1
    m: int = 1

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise InvalidInputError(f"unknown draft strategy {self.kind!r}")
        if self.s < 1 or self.m < 1:
            raise InvalidInputError("strategy needs s >= 1 and m >= 1")

    @property
    def size(self) -> int:
        return self.s * self.m


@dataclass
class DraftFamilyRun:
    """Trained draft family with per-member logs and group (chunk) ids."""

    family: ModelFamily
    logs: List[List[Dict]]
    groups: List[int]
    chunks: Optional[List[List[int]]] = None


def _base_teacher(teacher: Teacher) -> AutoregressiveModel:
    if isinstance(teacher, StochasticTeacher):
        return teacher.base
    if isinstance(teacher, (EnumeratedTeacher, CorpusTeacher)):
        raise InvalidInputError("reverse-KL drafts need a single teacher model")
    return teacher


def train_draft_family(
    strategy: DraftStrategy,
    draft_template: AutoregressiveModel,
    teacher: Optional[Teacher],
    corpus: GeneratedCorpus,
    config: TrainConfig,
    init_noise: Optional[LowRankNoiseSpec] = None,
    raw_corpus: Optional[GeneratedCorpus] = None,
    partition_by_query: bool = False,
) -> DraftFamilyRun:
    """Train ``s * m`` drafts; member ``i * m + j`` is model ``j`` of group ``i``.

    * untrained: fit on ``raw_corpus`` (gold answers) only, no teacher signal.
    * ddd: group ``i`` trains on chunk ``i`` of a balanced record partition.
    * idd: each member starts from a perturbed template, trains on all records.
    * fdd: perturbed start and chunked data.
    * reverse_kl: on-policy reverse KL to the (base) teacher.

    Members of one group differ only by their training-order seed (and their
    initialization noise for idd/fdd).
    """
    if len(corpus) == 0:
        raise InvalidInputError("empty corpus")
    kind, s, m = strategy.kind, strategy.s, strategy.m
    chunks: Optional[List[List[int]]] = None
    if kind in (DDD, FDD):
        plan = partition_corpus(corpus, s, rng_mod.derive(config.seed, _PARTITION), partition_by_query)
        chunks = [plan.chunk(i) for i in range(s)]
    if kind in (IDD, FDD) and init_noise is None:
        raise InvalidInputError(f"strategy {kind} needs an init_noise spec")
    if kind == UNTRAINED and raw_corpus is None:
        raise InvalidInputError("untrained drafts need raw task data")

    members, logs, groups = [], [], []
    for i in range(s):
        for j in range(m):
            member_seed = rng_mod.derive(config.seed, i, j)
            cfg = replace(config, seed=member_seed)
            start = draft_template
            if kind in (IDD, FDD):
                start = perturb_low_rank(draft_template, init_noise, rng_mod.derive(member_seed, _INIT))
            if kind == UNTRAINED:
                run = distill(start, None, raw_corpus, replace(cfg, signal=SAMPLES))
            elif kind == REVERSE_KL:
                run = reverse_kl_train(start, _base_teacher(teacher), corpus, cfg)
            else:
                run = distill(start, teacher, corpus, cfg, chunks[i] if chunks else None)
            members.append(run.model.with_params(run.model.params, provenance=DRAFT_FAMILY))
            logs.append(run.log)
            groups.append(i)
    return DraftFamilyRun(ModelFamily(tuple(members), DRAFT_FAMILY), logs, groups, chunks)


# -- gradient checks ----------------------------------------------------------


def forward_kl_loss_grad(model: AutoregressiveModel, teacher_dist, context, params=None) -> Tuple[float, np.ndarray]:
    """KL(teacher || model(context)) and its gradient w.r.t. the flat params."""
    p = np.asarray(teacher_dist, dtype=np.float64)
    ctx = model.encode_context(context)[None]
    logits, cache = model.forward(ctx, params)
    log_q = log_softmax_rows(logits)
    loss = float(_kl_rows(p[None], log_q)[0])
    return loss, model.backward(cache, np.exp(log_q) - p[None])


def check_gradients(model: AutoregressiveModel, teacher_dist, context, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Entry-wise error is ``|a - n| / max(|a|, |n|, 1e-8)``; entries where both
    gradients vanish contribute zero.
    """
    _, analytic = forward_kl_loss_grad(model, teacher_dist, context)
    base = model.params.copy()
    numeric = np.empty_like(base)
    for k in range(base.size):
        up, down = base.copy(), base.copy()
        up[k] += step
        down[k] -= step
        numeric[k] = (
            forward_kl_loss_grad(model, teacher_dist, context, up)[0]
            - forward_kl_loss_grad(model, teacher_dist, context, down)[0]
        ) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# -- capacity-limited student for the mode-seeking demonstration -------------


def discretized_gaussian(loc: float, log_scale: float, V: int) -> np.ndarray:
    """Gaussian bump over token positions 0..V-1, normalized over the vocabulary."""
    x = np.arange(V, dtype=np.float64)
    z = -0.5 * ((x - loc) / math.exp(log_scale)) ** 2
    return softmax_rows(z)


def _dgauss_logit_jac(loc: float, log_scale: float, V: int) -> np.ndarray:
    # d logits / d (loc, log_scale), shape (V, 2)
    x = np.arange(V, dtype=np.float64)
    inv_var = math.exp(-2 * log_scale)
    return np.stack([(x - loc) * inv_var, (x - loc) ** 2 * inv_var], axis=1)


def divergence_to_teacher(q: np.ndarray, p: np.ndarray, direction: str) -> float:
    # far-off grid points underflow to zero probability; their loss is +inf
    with np.errstate(divide="ignore"):
        if direction == "forward":
            return float(_kl_rows(p[None], np.log(q)[None])[0])
        if direction == "reverse":
            return float(_kl_rows(q[None], np.log(p)[None])[0])
    raise InvalidInputError(f"unknown direction {direction!r}")


def fit_discretized_gaussian(
    teacher: np.ndarray,
    direction: str,
    init: Tuple[float, float],
    learning_rate: float = 0.05,
    steps: int = 5000,
) -> Tuple[float, float]:
    """Gradient-descent fit of ``(loc, log_scale)`` under forward or reverse KL."""
    p = np.asarray(teacher, dtype=np.float64)
    V = p.size
    theta = np.array(init, dtype=np.float64)
    for step in range(steps):
        q = discretized_gaussian(theta[0], theta[1], V)
        if direction == "forward":
            dlogits = q - p
        elif direction == "reverse":
            diff = np.log(q) - np.log(p)
            dlogits = q * (diff - np.dot(q, diff))
        else:
            raise InvalidInputError(f"unknown direction {direction!r}")
        grad = _dgauss_logit_jac(theta[0], theta[1], V).T @ dlogits
        theta -= learning_rate * grad
        if not np.all(np.isfinite(theta)):
            raise TrainingError(f"non-finite parameters at step {step}", step=step)
    return float(theta[0]), float(theta[1])


def grid_search_discretized_gaussian(
    teacher: np.ndarray, direction: str, locs: Sequence[float], log_scales: Sequence[float]
) -> Tuple[float, float, float]:
    """Brute-force minimizer over a parameter grid: ``(loc, log_scale, loss)``."""
    p = np.asarray(teacher, dtype=np.float64)
    best = (math.nan, math.nan, math.inf)
    for loc in locs:
        for ls in log_scales:
            loss = divergence_to_teacher(discretized_gaussian(loc, ls, p.size), p, direction)
            if loss < best[2]:
                best = (float(loc), float(ls), loss)
    return best
