"""Epistemic-uncertainty estimators.

``ground_truth_eu`` is the mutual information of a finite target family.
``proxy_eu`` is the draft-based estimate ``mean_k KL(q_k || proxy)``, reported
together with its two parts: the JSD among drafts (variance proxy) and
``KL(q_mix || proxy)`` (bias proxy). The parts add up to the total exactly
in exact arithmetic; the functions compute all three independently so the
identity can be checked numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from drafteu import io
from drafteu.errors import InvalidInputError
from drafteu.models import (
    KONLY,
    AutoregressiveModel,
    LowRankNoiseSpec,
    ModelFamily,
    next_token_dist,
    perturb_low_rank,
)
from drafteu import rng as rng_mod
from drafteu.simplex import as_categorical, entropy, jsd, kl, mixture

MEAN, SUM, MAX = "mean", "sum", "max"
AGGREGATIONS = (MEAN, SUM, MAX)


@dataclass(frozen=True)
class TokenEU:
    position: int
    variance_proxy: float
    bias_proxy: float
    estimated_total: float
    ground_truth: Optional[float] = None

    @property
    def flagged(self) -> bool:
        """True when a support violation made the estimate infinite."""
        return not (math.isfinite(self.bias_proxy) and math.isfinite(self.estimated_total))


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def eu_two_forms(member_dists: Sequence) -> Tuple[float, float]:
    """Mutual information of a finite family, as (KL form, entropy form).

    KL form: mean over members of KL(p_m || p_bar).
    Entropy form: H(p_bar) - mean over members of H(p_m).
    """
    dists = [as_categorical(d) for d in member_dists]
    if not dists:
        raise InvalidInputError("need at least one member")
    avg = mixture(dists)
    kl_form = _mean(kl(d, avg) for d in dists)
    ent_form = entropy(avg) - _mean(entropy(d) for d in dists)
    return kl_form, ent_form


def ground_truth_eu(family: ModelFamily, context: Sequence[int]) -> float:
    """Epistemic uncertainty of the target family at ``context`` (nats)."""
    return eu_two_forms([next_token_dist(m, context) for m in family])[0]


def proxy_eu(draft_dists: Sequence, proxy, position: int = 0, ground_truth: Optional[float] = None) -> TokenEU:
    """Draft-ensemble estimate and its variance/bias split at one position."""
    if len(draft_dists) < 2:
        raise InvalidInputError("proxy_eu needs at least two drafts")
    proxy = as_categorical(proxy, "proxy")
    if np.any(proxy <= 0):
        raise InvalidInputError("proxy distribution must be strictly positive")
    drafts = [as_categorical(q, f"drafts[{i}]") for i, q in enumerate(draft_dists)]
    variance = jsd(drafts)
    bias = kl(mixture(drafts), proxy)
    total = _mean(kl(q, proxy) for q in drafts)
    return TokenEU(position, variance, bias, total, ground_truth)


def upper_bound_identity(target_family: ModelFamily, draft_dists: Sequence, context: Sequence[int]):
    """Return ``(lhs, eu, gap)`` with ``lhs = mean KL(p_theta || q_mix)``.

    ``gap = KL(p_T || q_mix)``; the identity ``lhs = eu + gap`` holds exactly.
    """
    members = [next_token_dist(m, context) for m in target_family]
    return upper_bound_terms(members, draft_dists)


def upper_bound_terms(member_dists: Sequence, draft_dists: Sequence) -> Tuple[float, float, float]:
    members = [as_categorical(d) for d in member_dists]
    q_mix = mixture([as_categorical(q) for q in draft_dists])
    p_t = mixture(members)
    lhs = _mean(kl(p, q_mix) for p in members)
    eu = eu_two_forms(members)[0]
    return lhs, eu, kl(p_t, q_mix)


# -- proxies ------------------------------------------------------------------

RAW_FAMILY_AVERAGE = "raw_family_average"
DISTILLED_MIX = "distilled_mix"


@dataclass(frozen=True)
class ProxyTarget:
    """Stand-in for the target's predictive average.

    Either the raw average of a (small) target family, or one distilled model.
    """

    kind: str
    source: Union[ModelFamily, AutoregressiveModel]

    @classmethod
    def raw(cls, family: ModelFamily) -> "ProxyTarget":
        return cls(RAW_FAMILY_AVERAGE, family)

    @classmethod
    def distilled(cls, model: AutoregressiveModel) -> "ProxyTarget":
        return cls(DISTILLED_MIX, model)

    def probs(self, contexts) -> np.ndarray:
        if self.kind == RAW_FAMILY_AVERAGE:
            return np.mean(self.source.member_probs(contexts), axis=0)
        if self.kind == DISTILLED_MIX:
            return self.source.probs(contexts)
        raise InvalidInputError(f"unknown proxy kind {self.kind!r}")

    def dists(self, contexts) -> List[np.ndarray]:
        """Per-context distributions, evaluated in one batch like the drafts."""
        if self.kind == RAW_FAMILY_AVERAGE:
            member_p = self.source.member_probs(contexts)
            return [mixture(list(member_p[:, t])) for t in range(len(contexts))]
        return list(self.probs(contexts))

    def dist(self, context) -> np.ndarray:
        if self.kind == RAW_FAMILY_AVERAGE:
            return mixture([next_token_dist(m, context) for m in self.source])
        return next_token_dist(self.source, context)


def token_eu_trace(
    drafts: ModelFamily,
    proxy: ProxyTarget,
    sequence: Sequence[int],
    prompt: Sequence[int] = (),
    target_family: Optional[ModelFamily] = None,
) -> List[TokenEU]:
    """Per-position EU records for ``sequence`` generated after ``prompt``.

    At position ``t`` every model sees ``prompt + sequence[:t]``.
    """
    if len(sequence) == 0:
        raise InvalidInputError("sequence must be nonempty")
    prefixes = [tuple(prompt) + tuple(sequence[:t]) for t in range(len(sequence))]
    draft_p = drafts.member_probs(prefixes)
    proxy_p = proxy.dists(prefixes)
    target_p = None if target_family is None else target_family.member_probs(prefixes)
    out = []
    for t in range(len(prefixes)):
        gt = None if target_p is None else eu_two_forms(list(target_p[:, t]))[0]
        out.append(proxy_eu(list(draft_p[:, t]), proxy_p[t], position=t, ground_truth=gt))
    return out


def sequence_eu(trace: Sequence[TokenEU], aggregation: str = MEAN) -> float:
    """Aggregate per-token estimated totals into one sequence score."""
    if not trace:
        raise InvalidInputError("empty trace")
    vals = [rec.estimated_total for rec in trace]
    if aggregation == MEAN:
        return _mean(vals)
    if aggregation == SUM:
        return math.fsum(vals)
    if aggregation == MAX:
        return max(vals)
    raise InvalidInputError(f"unknown aggregation {aggregation!r}")


def sequence_ground_truth(trace: Sequence[TokenEU], aggregation: str = MEAN) -> float:
    vals = [rec.ground_truth for rec in trace]
    if any(v is None for v in vals):
        raise InvalidInputError("trace has no ground truth")
    return sequence_eu([TokenEU(r.position, 0.0, 0.0, v) for r, v in zip(trace, vals)], aggregation)


def konly_family(draft: AutoregressiveModel, k: int, noise: LowRankNoiseSpec, seed: int) -> ModelFamily:
    """``k`` independently perturbed copies of one draft."""
    if k < 2:
        raise InvalidInputError("K-only ensembles need k >= 2")
    members = tuple(perturb_low_rank(draft, noise, rng_mod.derive(seed, i)) for i in range(k))
    return ModelFamily(members, KONLY)


def konly_draft_dists(draft: AutoregressiveModel, k: int, noise: LowRankNoiseSpec, seed: int, context) -> List[np.ndarray]:
    return [next_token_dist(m, context) for m in konly_family(draft, k, noise, seed)]


# -- files ------------------------------------------------------------------


def _num(x: Optional[float]):
    return None if x is None or not math.isfinite(x) else x


def trace_rows(sequence_id: str, trace: Sequence[TokenEU]) -> List[dict]:
    return [
        {
            "sequence_id": sequence_id,
            "position": r.position,
            "variance_proxy": _num(r.variance_proxy),
            "bias_proxy": _num(r.bias_proxy),
            "estimated_total": _num(r.estimated_total),
            "ground_truth": _num(r.ground_truth),
            "flagged": r.flagged,
        }
        for r in trace
    ]


def save_traces(traces: Sequence[Tuple[str, Sequence[TokenEU]]], path) -> Path:
    return io.write_jsonl(path, [row for sid, tr in traces for row in trace_rows(sid, tr)])


def load_traces(path) -> List[Tuple[str, List[TokenEU]]]:
    grouped: dict = {}
    for row in io.read_jsonl(path):
        inf = math.inf
        rec = TokenEU(
            row["position"],
            row["variance_proxy"],
            inf if row["bias_proxy"] is None else row["bias_proxy"],
            inf if row["estimated_total"] is None else row["estimated_total"],
            row["ground_truth"],
        )
        grouped.setdefault(row["sequence_id"], []).append(rec)
    return list(grouped.items())
