"""Toy autoregressive next-token models and posterior simulation.

Two backends share one interface:

* ``tabular``: one free logit row per context tuple (full capacity).
* ``linear_softmax``: logits from the concatenated one-hot context. With
  ``hidden_width == 0`` this is a single linear map; with ``hidden_width > 0``
  a tanh hidden layer of that width sits in between, which is how targets
  and drafts get different capacities.

Models are immutable. Parameters live in one flat read-only float64 array;
``blocks()`` describes the matrix-shaped slices of it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from drafteu import rng as rng_mod
from drafteu.errors import InvalidInputError
from drafteu.simplex import mixture, softmax_rows

TABULAR = "tabular"
LINEAR_SOFTMAX = "linear_softmax"
BACKENDS = (TABULAR, LINEAR_SOFTMAX)

TARGET_FAMILY = "target_family"
DRAFT_FAMILY = "draft_family"
KONLY = "k_only"


@dataclass(frozen=True)
class VocabSpec:
    size: int
    bos_id: int = 0
    eos_id: Optional[int] = 1

    def __post_init__(self):
        if self.size < 2:
            raise InvalidInputError("vocabulary size must be at least 2")
        if not 0 <= self.bos_id < self.size:
            raise InvalidInputError("bos_id out of range")
        if self.eos_id is not None:
            if not 0 <= self.eos_id < self.size:
                raise InvalidInputError("eos_id out of range")
            if self.eos_id == self.bos_id:
                raise InvalidInputError("bos_id and eos_id must differ")


@dataclass(frozen=True)
class Block:
    name: str
    offset: int
    shape: Tuple[int, int]

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]


def param_layout(backend: str, vocab_size: int, n: int, hidden: int) -> List[Block]:
    V = vocab_size
    if backend == TABULAR:
        return [Block("table", 0, (V**n, V))]
    if backend == LINEAR_SOFTMAX:
        if hidden == 0:
            return [Block("w_out", 0, (n * V, V))]
        return [Block("w_in", 0, (n * V, hidden)), Block("w_out", n * V * hidden, (hidden, V))]
    raise InvalidInputError(f"unknown backend {backend!r}")


@dataclass(frozen=True, eq=False)
class AutoregressiveModel:
    """Next-token model ``p(. | last n tokens)``.

    ``provenance`` and ``seed_lineage`` are bookkeeping only; they are saved
    in checkpoints but never affect predictions.
    """

    backend: str
    context_window: int
    params: np.ndarray
    vocab: VocabSpec
    hidden_width: int = 0
    provenance: str = ""
    seed_lineage: Tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise InvalidInputError(f"unknown backend {self.backend!r}")
        if self.context_window < 1:
            raise InvalidInputError("context_window must be >= 1")
        if self.hidden_width < 0 or (self.backend == TABULAR and self.hidden_width != 0):
            raise InvalidInputError("hidden_width must be 0 for tabular and >= 0 otherwise")
        p = np.array(self.params, dtype=np.float64).ravel()
        expected = sum(b.size for b in self.blocks())
        if p.size != expected:
            raise InvalidInputError(f"expected {expected} params, got {p.size}")
        if not np.all(np.isfinite(p)):
            raise InvalidInputError("params must be finite")
        p.flags.writeable = False
        object.__setattr__(self, "params", p)
        object.__setattr__(self, "seed_lineage", tuple(int(s) for s in self.seed_lineage))

    # -- structure -------------------------------------------------------

    @property
    def V(self) -> int:
        return self.vocab.size

    def blocks(self) -> List[Block]:
        return param_layout(self.backend, self.vocab.size, self.context_window, self.hidden_width)

    def block_view(self, params: np.ndarray, name: str) -> np.ndarray:
        for b in self.blocks():
            if b.name == name:
                return params[b.offset : b.offset + b.size].reshape(b.shape)
        raise KeyError(name)

    def with_params(self, params, provenance: Optional[str] = None, seed_lineage=None) -> "AutoregressiveModel":
        return AutoregressiveModel(
            backend=self.backend,
            context_window=self.context_window,
            params=params,
            vocab=self.vocab,
            hidden_width=self.hidden_width,
            provenance=self.provenance if provenance is None else provenance,
            seed_lineage=self.seed_lineage if seed_lineage is None else seed_lineage,
        )

    def same_shape(self, other: "AutoregressiveModel") -> bool:
        return (
            self.backend == other.backend
            and self.context_window == other.context_window
            and self.vocab == other.vocab
            and self.hidden_width == other.hidden_width
        )

    # -- contexts --------------------------------------------------------

    def encode_context(self, context: Sequence[int]) -> np.ndarray:
        """Last ``n`` tokens of ``context``, left-padded with bos."""
        n = self.context_window
        toks = [int(t) for t in context]
        for t in toks:
            if not 0 <= t < self.V:
                raise InvalidInputError(f"token {t} out of range for V={self.V}")
        toks = toks[-n:] if len(toks) >= n else [self.vocab.bos_id] * (n - len(toks)) + toks
        return np.array(toks, dtype=np.int64)

    def encode_contexts(self, contexts: Sequence[Sequence[int]]) -> np.ndarray:
        if len(contexts) == 0:
            return np.zeros((0, self.context_window), dtype=np.int64)
        return np.stack([self.encode_context(c) for c in contexts])

    # -- forward / backward ----------------------------------------------

    def forward(self, ctx: np.ndarray, params: Optional[np.ndarray] = None):
        """Logits for encoded contexts ``ctx`` of shape (B, n).

        Returns ``(logits, cache)``; ``cache`` feeds ``backward``.
        """
        p = self.params if params is None else params
        V, n = self.V, self.context_window
        ctx = np.asarray(ctx, dtype=np.int64)
        if self.backend == TABULAR:
            rows = np.zeros(len(ctx), dtype=np.int64)
            for j in range(n):
                rows = rows * V + ctx[:, j]
            return self.block_view(p, "table")[rows], rows
        cols = ctx + (np.arange(n) * V)[None, :]
        if self.hidden_width == 0:
            w = self.block_view(p, "w_out")
            return w[cols].sum(axis=1), cols
        w_in = self.block_view(p, "w_in")
        w_out = self.block_view(p, "w_out")
        hidden = np.tanh(w_in[cols].sum(axis=1))
        return hidden @ w_out, (cols, hidden, w_out)

    def backward(self, cache, dlogits: np.ndarray) -> np.ndarray:
        """Gradient of ``sum(dlogits * logits)`` with respect to the flat params."""
        grad = np.zeros(self.params.size)
        if self.backend == TABULAR:
            g = self.block_view(grad, "table")
            np.add.at(g, cache, dlogits)
            return grad
        if self.hidden_width == 0:
            g = self.block_view(grad, "w_out")
            for j in range(self.context_window):
                np.add.at(g, cache[:, j], dlogits)
            return grad
        cols, hidden, w_out = cache
        self.block_view(grad, "w_out")[:] = hidden.T @ dlogits
        dpre = (dlogits @ w_out.T) * (1.0 - hidden**2)
        g_in = self.block_view(grad, "w_in")
        for j in range(self.context_window):
            np.add.at(g_in, cols[:, j], dpre)
        return grad

    def logits(self, contexts: Sequence[Sequence[int]]) -> np.ndarray:
        return self.forward(self.encode_contexts(contexts))[0]

    def probs(self, contexts: Sequence[Sequence[int]]) -> np.ndarray:
        return softmax_rows(self.logits(contexts))


def init_model(
    backend: str,
    vocab: VocabSpec,
    context_window: int,
    hidden_width: int = 0,
    scale: float = 0.0,
    seed: int = 0,
    provenance: str = "",
) -> AutoregressiveModel:
    """Model with i.i.d. N(0, scale^2) parameters (all zeros when scale == 0)."""
    size = sum(b.size for b in param_layout(backend, vocab.size, context_window, hidden_width))
    params = np.zeros(size) if scale == 0 else rng_mod.stream(seed).normal(0.0, scale, size)
    return AutoregressiveModel(backend, context_window, params, vocab, hidden_width, provenance, (seed,))


def next_token_dist(model: AutoregressiveModel, context: Sequence[int]) -> np.ndarray:
    """Strictly positive next-token distribution at ``context``."""
    return model.probs([context])[0]


@dataclass(frozen=True)
class LowRankNoiseSpec:
    """Low-rank Gaussian parameter noise.

    ``targets`` names the parameter blocks to perturb; ``None`` means every
    matrix block of the model.
    """

    rank: int
    sigma: float
    targets: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        if self.rank < 1:
            raise InvalidInputError("noise rank must be >= 1")
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise InvalidInputError("noise sigma must be finite and nonnegative")
        if self.targets is not None:
            object.__setattr__(self, "targets", tuple(self.targets))

    def target_blocks(self, model: AutoregressiveModel) -> List[Tuple[int, Block]]:
        blocks = list(enumerate(model.blocks()))
        if self.targets is not None:
            unknown = set(self.targets) - {b.name for _, b in blocks}
            if unknown:
                raise InvalidInputError(f"unknown noise targets {sorted(unknown)}")
            blocks = [(i, b) for i, b in blocks if b.name in self.targets]
        for _, b in blocks:
            if self.rank > min(b.shape):
                raise InvalidInputError(f"rank {self.rank} exceeds min dimension of block {b.name} {b.shape}")
        return blocks


def low_rank_delta(shape: Tuple[int, int], rank: int, sigma: float, gen: np.random.Generator) -> np.ndarray:
    """``(1/sqrt(r)) A B^T`` with A, B entries ~ N(0, sigma^2)."""
    d1, d2 = shape
    a = gen.normal(0.0, sigma, (d1, rank))
    b = gen.normal(0.0, sigma, (d2, rank))
    return (a @ b.T) / math.sqrt(rank)


def perturb_low_rank(model: AutoregressiveModel, noise: LowRankNoiseSpec, seed: int) -> AutoregressiveModel:
    """Copy of ``model`` with low-rank Gaussian noise added to the target blocks.

    Block ``i`` draws from ``stream(seed, i)``, so the noise on one block does
    not depend on which other blocks are targeted.
    """
    blocks = noise.target_blocks(model)
    params = model.params.copy()
    if noise.sigma > 0:
        for idx, b in blocks:
            delta = low_rank_delta(b.shape, noise.rank, noise.sigma, rng_mod.stream(seed, idx))
            params[b.offset : b.offset + b.size] += delta.ravel()
    return model.with_params(params, seed_lineage=model.seed_lineage + (seed,))


@dataclass(frozen=True)
class ModelFamily:
    members: Tuple[AutoregressiveModel, ...]
    provenance: str = TARGET_FAMILY

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise InvalidInputError("a model family needs at least one member")
        first = members[0]
        for m in members[1:]:
            if m.vocab != first.vocab or m.context_window != first.context_window:
                raise InvalidInputError("family members must share vocab and context window")
        object.__setattr__(self, "members", members)

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, i) -> AutoregressiveModel:
        return self.members[i]

    def member_probs(self, contexts: Sequence[Sequence[int]]) -> np.ndarray:
        """Array of shape (members, contexts, V)."""
        return np.stack([m.probs(contexts) for m in self.members])


def make_target_family(base: AutoregressiveModel, m: int, noise: LowRankNoiseSpec, seed: int) -> ModelFamily:
    if m < 1:
        raise InvalidInputError("family size must be >= 1")
    members = []
    for i in range(m):
        member = perturb_low_rank(base, noise, rng_mod.derive(seed, i))
        members.append(member.with_params(member.params, provenance=TARGET_FAMILY))
    return ModelFamily(tuple(members), TARGET_FAMILY)


def predictive_average(family: ModelFamily, context: Sequence[int]) -> np.ndarray:
    """Uniform mixture of the members' next-token distributions."""
    return mixture([next_token_dist(m, context) for m in family])


def sample_sequence(
    model: AutoregressiveModel,
    prompt: Sequence[int],
    max_len: int,
    temperature: float,
    seed: int,
) -> List[int]:
    """Sample up to ``max_len`` tokens after ``prompt``; stops after eos.

    ``temperature == 0`` decodes greedily (ties go to the lowest index).
    """
    if max_len < 1:
        raise InvalidInputError("max_len must be >= 1")
    if temperature < 0:
        raise InvalidInputError("temperature must be nonnegative")
    gen = rng_mod.stream(seed)
    prefix = list(prompt)
    out: List[int] = []
    for _ in range(max_len):
        z = model.logits([prefix])[0]
        if temperature == 0:
            tok = int(np.argmax(z))
        else:
            p = softmax_rows(z / temperature)
            cdf = np.cumsum(p)
            tok = int(min(np.searchsorted(cdf, gen.random() * cdf[-1], side="right"), len(p) - 1))
        out.append(tok)
        prefix.append(tok)
        if model.vocab.eos_id is not None and tok == model.vocab.eos_id:
            break
    return out
