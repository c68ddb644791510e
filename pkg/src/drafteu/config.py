"""Experiment configuration: JSON document <-> frozen dataclasses.

Unknown keys are rejected at every nesting level.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from drafteu.distillation import STRATEGIES, DDD, DraftStrategy, TrainConfig
from drafteu.errors import InvalidInputError
from drafteu.estimators import AGGREGATIONS, DISTILLED_MIX, MEAN, RAW_FAMILY_AVERAGE
from drafteu.evaluation import COST_MODES, DRAFTS_PLUS_TARGET
from drafteu.models import LowRankNoiseSpec

SXM = "sxm"
KONLY = "konly"
TOKEN = "token"
SEQUENCE = "sequence"
COVERED = "covered"
ALL = "all"
CORPUS_SCOPES = (COVERED, ALL)


@dataclass(frozen=True)
class NoiseConfig:
    rank: int = 2
    sigma: float = 0.5
    targets: Optional[Tuple[str, ...]] = None

    def spec(self) -> LowRankNoiseSpec:
        return LowRankNoiseSpec(self.rank, self.sigma, self.targets)


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = DDD
    s: int = 2
    m: int = 3

    def strategy(self) -> DraftStrategy:
        return DraftStrategy(self.kind, self.s, self.m)


@dataclass(frozen=True)
class EnsembleConfig:
    mode: str = SXM
    k: int = 3
    noise: NoiseConfig = NoiseConfig(rank=2, sigma=0.3)


@dataclass(frozen=True)
class TrainSection:
    learning_rate: float
    steps: int
    batch_size: int
    teacher_samples_per_step: int = 2
    signal: str = "soft"

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.steps, self.batch_size, self.teacher_samples_per_step, seed, self.signal)


@dataclass(frozen=True)
class TrainingConfigs:
    target_pretrain: TrainSection = TrainSection(0.5, 1500, 64, signal="samples")
    draft_pretrain: TrainSection = TrainSection(0.5, 600, 64, signal="samples")
    drafts: TrainSection = TrainSection(0.5, 600, 64)
    pmix: TrainSection = TrainSection(0.5, 1500, 64, teacher_samples_per_step=2)
    reverse_kl: TrainSection = TrainSection(0.5, 300, 32)


@dataclass(frozen=True)
class ExperimentConfig:
    vocab_size: int = 12
    context_window: int = 3
    key_len: int = 2
    target_hidden: int = 32
    draft_hidden: int = 8
    init_scale: float = 0.3
    target_family_size: int = 3
    target_noise: NoiseConfig = NoiseConfig(rank=2, sigma=0.5)
    draft_init_noise: NoiseConfig = NoiseConfig(rank=2, sigma=0.5)
    n_queries: int = 60
    coverage: float = 0.6
    responses_per_query: int = 4
    temperature: float = 1.0
    max_len: int = 8
    eval_samples_per_query: int = 3
    stratified_pmix_corpus: bool = True
    stratified_draft_corpus: bool = False
    draft_corpus_queries: str = "all"
    pmix_corpus_queries: str = "all"
    partition_by_query: bool = False
    strategy: StrategyConfig = StrategyConfig()
    ensemble: EnsembleConfig = EnsembleConfig()
    proxy: str = DISTILLED_MIX
    aggregation: str = MEAN
    fidelity_population: str = TOKEN
    ece_bins: int = 10
    calibration_reg: float = 1e-3
    cost_mode: str = DRAFTS_PLUS_TARGET
    runs: int = 5
    seed: int = 0
    training: TrainingConfigs = TrainingConfigs()

    def __post_init__(self):
        positive = ["vocab_size", "context_window", "key_len", "target_family_size", "n_queries",
                    "responses_per_query", "max_len", "eval_samples_per_query", "ece_bins", "runs"]
        for name in positive:
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        if self.draft_hidden > self.target_hidden:
            raise InvalidInputError("draft_hidden must not exceed target_hidden")
        if not 0 < self.coverage <= 1:
            raise InvalidInputError("coverage must lie in (0, 1]")
        for name in ("draft_corpus_queries", "pmix_corpus_queries"):
            if getattr(self, name) not in CORPUS_SCOPES:
                raise InvalidInputError(f"{name} must be one of {CORPUS_SCOPES}")
        if self.strategy.kind not in STRATEGIES:
            raise InvalidInputError(f"unknown strategy {self.strategy.kind!r}")
        if self.ensemble.mode not in (SXM, KONLY):
            raise InvalidInputError(f"unknown ensemble mode {self.ensemble.mode!r}")
        if self.proxy not in (DISTILLED_MIX, RAW_FAMILY_AVERAGE):
            raise InvalidInputError(f"unknown proxy kind {self.proxy!r}")
        if self.aggregation not in AGGREGATIONS:
            raise InvalidInputError(f"unknown aggregation {self.aggregation!r}")
        if self.fidelity_population not in (TOKEN, SEQUENCE):
            raise InvalidInputError(f"unknown fidelity population {self.fidelity_population!r}")
        if self.cost_mode not in COST_MODES:
            raise InvalidInputError(f"unknown cost mode {self.cost_mode!r}")
        if not 0 <= self.seed < 2**64:
            raise InvalidInputError("seed must be an unsigned 64-bit integer")


def _build(cls, doc: Any, path: str):
    if not dataclasses.is_dataclass(cls):
        return doc
    if not isinstance(doc, dict):
        raise InvalidInputError(f"{path or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise InvalidInputError(f"unknown config key(s) at {path or 'top level'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        sub = _NESTED.get((cls, name))
        if sub is not None:
            value = _build(sub, value, f"{path}.{name}" if path else name)
        elif name == "targets" and value is not None:
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise InvalidInputError(str(exc)) from exc


_NESTED = {
    (ExperimentConfig, "target_noise"): NoiseConfig,
    (ExperimentConfig, "draft_init_noise"): NoiseConfig,
    (ExperimentConfig, "strategy"): StrategyConfig,
    (ExperimentConfig, "ensemble"): EnsembleConfig,
    (ExperimentConfig, "training"): TrainingConfigs,
    (EnsembleConfig, "noise"): NoiseConfig,
    (TrainingConfigs, "target_pretrain"): TrainSection,
    (TrainingConfigs, "draft_pretrain"): TrainSection,
    (TrainingConfigs, "drafts"): TrainSection,
    (TrainingConfigs, "pmix"): TrainSection,
    (TrainingConfigs, "reverse_kl"): TrainSection,
}


def config_from_dict(doc: Dict) -> ExperimentConfig:
    return _build(ExperimentConfig, doc, "")


def config_to_dict(cfg) -> Dict:
    doc = dataclasses.asdict(cfg)
    return json.loads(json.dumps(doc))


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(doc)


def canonical_json(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))


def fingerprint(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonicalized config document."""
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()
