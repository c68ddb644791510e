"""One end-to-end experiment run, split into stages that can run separately.

Stage outputs are plain objects so that the CLI can persist them between
invocations and ``run_single`` can chain them in memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import rel_entr

from drafteu import rng as rng_mod
from drafteu.config import COVERED, KONLY, SEQUENCE, ExperimentConfig
from drafteu.datagen import (
    GeneratedCorpus,
    LabeledSample,
    QADataset,
    generate_corpus,
    label_correctness,
    make_synthetic_qa,
    raw_task_corpus,
)
from drafteu.distillation import (
    DDD,
    FDD,
    IDD,
    REVERSE_KL,
    UNTRAINED,
    CorpusTeacher,
    DraftStrategy,
    StochasticTeacher,
    distill,
    osd_train,
    train_draft_family,
)
from drafteu.estimators import (
    DISTILLED_MIX,
    ProxyTarget,
    TokenEU,
    konly_family,
    sequence_eu,
    sequence_ground_truth,
    token_eu_trace,
)
from drafteu.evaluation import (
    calibration_split,
    ccc,
    detection_metrics,
    draft_method_cost,
    fit_logistic,
    relative_flops,
    rmse,
    spearman,
    CostEntry,
)
from drafteu.errors import UndefinedCorrelationError
from drafteu.models import (
    LINEAR_SOFTMAX,
    AutoregressiveModel,
    ModelFamily,
    VocabSpec,
    init_model,
    make_target_family,
)

# stream ids under the run seed
DATA, TARGET_INIT, TARGET_TRAIN, CORPUS, PMIX_INIT, PMIX_TRAIN = 1, 2, 3, 4, 5, 6
DRAFT_INIT, DRAFT_TRAIN, KONLY_NOISE, EVAL_FAMILY, EVAL_SAMPLES, CALIB, TEACHER_FAMILY = 7, 8, 9, 10, 11, 12, 13
RAW_PROXY = 14


def run_seed(cfg: ExperimentConfig, run: int) -> int:
    return rng_mod.derive(cfg.seed, run)


def vocab_of(cfg: ExperimentConfig) -> VocabSpec:
    return VocabSpec(cfg.vocab_size, 0, 1)


@dataclass
class DataStage:
    data: QADataset
    covered: List[int]
    target: AutoregressiveModel
    teacher_family: ModelFamily
    corpus: GeneratedCorpus
    pmix_corpus: GeneratedCorpus

    @property
    def draft_teacher(self):
        """Per-record generator for a stratified corpus, else the base target."""
        if any(r.teacher_tag.startswith("family[") for r in self.corpus.records):
            return CorpusTeacher(self.teacher_family)
        return self.target


def stage_data(cfg: ExperimentConfig, seed: int) -> DataStage:
    """Task, pretrained base target and teacher-generated corpora."""
    vocab = vocab_of(cfg)
    data = make_synthetic_qa(vocab, cfg.n_queries, cfg.key_len, rng_mod.derive(seed, DATA))
    covered = list(range(int(math.ceil(cfg.coverage * len(data)))))
    init = init_model(LINEAR_SOFTMAX, vocab, cfg.context_window, cfg.target_hidden, cfg.init_scale,
                      rng_mod.derive(seed, TARGET_INIT), provenance="target")
    tcfg = cfg.training.target_pretrain.train_config(rng_mod.derive(seed, TARGET_TRAIN))
    target = distill(init, None, raw_task_corpus(data, covered), tcfg).model
    noise = cfg.target_noise.spec()
    teacher_family = make_target_family(target, cfg.target_family_size, noise, rng_mod.derive(seed, TEACHER_FAMILY))
    corpus_seed = rng_mod.derive(seed, CORPUS)

    def corpus_for(scope, stratified, stream):
        teacher = teacher_family if stratified else target
        queries = covered if scope == COVERED else None
        return generate_corpus(teacher, data, cfg.responses_per_query, cfg.temperature,
                               rng_mod.derive(corpus_seed, stream), queries, max_len=cfg.max_len)

    corpus = corpus_for(cfg.draft_corpus_queries, cfg.stratified_draft_corpus, 0)
    pmix_corpus = corpus_for(cfg.pmix_corpus_queries, cfg.stratified_pmix_corpus, 1)
    return DataStage(data, covered, target, teacher_family, corpus, pmix_corpus)


def stage_pmix(cfg: ExperimentConfig, seed: int, ds: DataStage) -> AutoregressiveModel:
    """Distill the proxy mean model from the stochastic target (OSD)."""
    vocab = vocab_of(cfg)
    init = init_model(LINEAR_SOFTMAX, vocab, cfg.context_window, cfg.target_hidden, cfg.init_scale,
                      rng_mod.derive(seed, PMIX_INIT), provenance="pmix")
    teacher = StochasticTeacher(ds.target, cfg.target_noise.spec())
    pcfg = cfg.training.pmix.train_config(rng_mod.derive(seed, PMIX_TRAIN))
    return osd_train(init, teacher, ds.pmix_corpus, pcfg).model


def draft_template(cfg: ExperimentConfig, seed: int) -> AutoregressiveModel:
    return init_model(LINEAR_SOFTMAX, vocab_of(cfg), cfg.context_window, cfg.draft_hidden, cfg.init_scale,
                      rng_mod.derive(seed, DRAFT_INIT), provenance="draft")


def stage_drafts(cfg: ExperimentConfig, seed: int, ds: DataStage, strategy=None):
    """Train the draft family; returns the ``DraftFamilyRun``."""
    strategy = strategy or cfg.strategy.strategy()
    section = cfg.training.draft_pretrain if strategy.kind == UNTRAINED else cfg.training.drafts
    if strategy.kind == "reverse_kl":
        section = cfg.training.reverse_kl
    tcfg = section.train_config(rng_mod.derive(seed, DRAFT_TRAIN))
    return train_draft_family(
        strategy,
        draft_template(cfg, seed),
        ds.target if strategy.kind == "reverse_kl" else ds.draft_teacher,
        ds.corpus,
        tcfg,
        init_noise=cfg.draft_init_noise.spec(),
        raw_corpus=raw_task_corpus(ds.data, ds.covered),
        partition_by_query=cfg.partition_by_query,
    )


def ensemble_family(cfg: ExperimentConfig, seed: int, drafts: ModelFamily) -> ModelFamily:
    if cfg.ensemble.mode == KONLY:
        return konly_family(drafts[0], cfg.ensemble.k, cfg.ensemble.noise.spec(), rng_mod.derive(seed, KONLY_NOISE))
    return drafts


def make_proxy(cfg: ExperimentConfig, seed: int, ds: DataStage, pmix: Optional[AutoregressiveModel]) -> ProxyTarget:
    if cfg.proxy == DISTILLED_MIX:
        return ProxyTarget.distilled(pmix)
    fam = make_target_family(ds.target, cfg.target_family_size, cfg.target_noise.spec(), rng_mod.derive(seed, RAW_PROXY))
    return ProxyTarget.raw(fam)


@dataclass
class EstimateStage:
    samples: List[LabeledSample]
    traces: List[Tuple[str, List[TokenEU]]]


def eval_family(cfg: ExperimentConfig, seed: int, target: AutoregressiveModel) -> ModelFamily:
    """Fresh posterior samples used only for ground truth."""
    return make_target_family(target, cfg.target_family_size, cfg.target_noise.spec(), rng_mod.derive(seed, EVAL_FAMILY))


def stage_estimate(cfg: ExperimentConfig, seed: int, ds: DataStage, drafts: ModelFamily, proxy: ProxyTarget,
                   samples: Optional[List[LabeledSample]] = None) -> EstimateStage:
    """Generate target answers, label them, and trace token-level EU."""
    if samples is None:
        samples = label_correctness(ds.target, ds.data, cfg.eval_samples_per_query, cfg.temperature,
                                    rng_mod.derive(seed, EVAL_SAMPLES), max_len=cfg.max_len)
    family = eval_family(cfg, seed, ds.target)
    traces = []
    for s in samples:
        sid = f"q{s.query_index:05d}-r{s.run_id}"
        traces.append((sid, token_eu_trace(drafts, proxy, s.response, ds.data.query(s.query_index), family)))
    return EstimateStage(samples, traces)


def _safe(fn, x, y):
    try:
        return fn(x, y)
    except UndefinedCorrelationError:
        return None


def evaluate_traces(cfg: ExperimentConfig, seed: int, samples: Sequence[LabeledSample],
                    traces: Sequence[Tuple[str, List[TokenEU]]]) -> Dict:
    """Fidelity and detection metrics for one run."""
    excluded = sum(1 for _, tr in traces if any(r.flagged for r in tr))
    kept = [(s, tr) for s, (_, tr) in zip(samples, traces) if not any(r.flagged for r in tr)]
    kept_ids = [sid for _, (sid, tr) in zip(samples, traces) if not any(r.flagged for r in tr)]
    if cfg.fidelity_population == SEQUENCE:
        est = [sequence_eu(tr, cfg.aggregation) for _, tr in kept]
        gt = [sequence_ground_truth(tr, cfg.aggregation) for _, tr in kept]
    else:
        est = [r.estimated_total for _, tr in kept for r in tr]
        gt = [r.ground_truth for _, tr in kept for r in tr]
    fidelity = {"rmse": rmse(est, gt), "spearman": _safe(spearman, est, gt), "ccc": _safe(ccc, est, gt),
                "n_pairs": len(est), "excluded_sequences": excluded}
    fidelity["mean_variance_proxy"] = float(np.mean([r.variance_proxy for _, tr in kept for r in tr]))
    fidelity["mean_bias_proxy"] = float(np.mean([r.bias_proxy for _, tr in kept for r in tr]))

    scores = np.array([sequence_eu(tr, cfg.aggregation) for _, tr in kept])
    incorrect = np.array([1 - s.label for s, _ in kept])
    qids = [s.query_index for s, _ in kept]
    train_q, _ = calibration_split(qids, rng_mod.derive(seed, CALIB))
    train = np.array([q in train_q for q in qids])
    detection = {"auroc": None, "ece": None, "brier": None, "n_test": int((~train).sum()),
                 "accuracy": float(1 - incorrect.mean()) if len(incorrect) else None}
    predictions = []
    if len(set(incorrect[train].tolist())) == 2 and (~train).any():
        calib = fit_logistic(scores[train], incorrect[train], cfg.calibration_reg)
        probs = calib.predict(scores[~train])
        detection.update(detection_metrics(probs, incorrect[~train], cfg.ece_bins))
        detection["calibration"] = {"slope": calib.slope, "intercept": calib.intercept}
        test_ids = [sid for sid, t in zip(kept_ids, train) if not t]
        predictions = [{"sequence_id": sid, "score": float(sc), "prob_incorrect": float(p), "incorrect": int(y)}
                       for sid, sc, p, y in zip(test_ids, scores[~train], probs, incorrect[~train])]
    return {"fidelity": fidelity, "detection": detection, "predictions": predictions}


def cost_entries(cfg: ExperimentConfig, ds: DataStage, n_drafts: int, draft_params: int) -> Tuple[CostEntry, CostEntry]:
    target_size = ds.target.params.size
    method = draft_method_cost("drafts", n_drafts, draft_params, target_size, cfg.cost_mode)
    baseline = CostEntry("target-perturbation", ((target_size, cfg.target_family_size),))
    return method, baseline


def run_single(cfg: ExperimentConfig, run: int) -> Dict:
    """Execute every stage for run index ``run``; returns the per-run record."""
    seed = run_seed(cfg, run)
    ds = stage_data(cfg, seed)
    pmix = stage_pmix(cfg, seed, ds) if cfg.proxy == DISTILLED_MIX else None
    draft_run = stage_drafts(cfg, seed, ds)
    drafts = ensemble_family(cfg, seed, draft_run.family)
    proxy = make_proxy(cfg, seed, ds, pmix)
    est = stage_estimate(cfg, seed, ds, drafts, proxy)
    metrics = evaluate_traces(cfg, seed, est.samples, est.traces)
    method, baseline = cost_entries(cfg, ds, len(drafts), drafts[0].params.size)
    return {
        "run_id": run,
        "seed": str(seed),
        **metrics,
        "rel_flops": relative_flops(method, baseline),
        "traces": est.traces,
        "samples": est.samples,
        "draft_logs": draft_run.logs,
    }


# -- ablations ----------------------------------------------------------------


def _rowwise_kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return rel_entr(p, q).sum(axis=-1)


def eval_contexts(ds: DataStage, samples: Sequence[LabeledSample]) -> List[Tuple[int, ...]]:
    """Every token-level context of the evaluation sequences, in trace order."""
    out = []
    for s in samples:
        prompt = ds.data.query(s.query_index)
        out.extend(tuple(prompt) + tuple(s.response[:t]) for t in range(len(s.response)))
    return out


def proxy_robustness(cfg: ExperimentConfig, ks: Sequence[int] = (3, 10), trials: int = 100, run: int = 0) -> Dict:
    """K-only estimator spread and bias spread for distilled vs raw-average proxies.

    One run's target, proxy and draft are trained once; each trial then draws
    fresh K-only draft noise and a fresh raw K-member target family. Returns,
    per K, the across-trial std of the token-averaged estimate and the
    across-trial variance of the token-averaged bias term under both proxies,
    plus the RMSE against ground truth per trial.
    """
    seed = run_seed(cfg, run)
    ds = stage_data(cfg, seed)
    pmix = stage_pmix(cfg, seed, ds)
    draft = stage_drafts(cfg, seed, ds).family[0]
    samples = label_correctness(ds.target, ds.data, cfg.eval_samples_per_query, cfg.temperature,
                                rng_mod.derive(seed, EVAL_SAMPLES), max_len=cfg.max_len)
    ctxs = eval_contexts(ds, samples)
    truth_p = eval_family(cfg, seed, ds.target).member_probs(ctxs)
    truth = _rowwise_kl(truth_p, truth_p.mean(axis=0)).mean(axis=0)
    p_dist = pmix.probs(ctxs)
    out = {}
    for k in ks:
        rows = {"distilled": [], "raw": []}
        for t in range(trials):
            q = konly_family(draft, k, cfg.ensemble.noise.spec(), rng_mod.derive(seed, KONLY_NOISE, k, t)).member_probs(ctxs)
            raw = make_target_family(ds.target, k, cfg.target_noise.spec(), rng_mod.derive(seed, RAW_PROXY, k, t))
            p_raw = raw.member_probs(ctxs).mean(axis=0)
            q_mix = q.mean(axis=0)
            for name, proxy in (("distilled", p_dist), ("raw", p_raw)):
                total = _rowwise_kl(q, proxy).mean(axis=0)
                rows[name].append((float(total.mean()), float(_rowwise_kl(q_mix, proxy).mean()),
                                   rmse(total, truth)))
        out[str(k)] = {
            name: {
                "estimate_std": float(np.std([r[0] for r in vals], ddof=1)),
                "bias_variance": float(np.var([r[1] for r in vals], ddof=1)),
                "rmse_mean": float(np.mean([r[2] for r in vals])),
                "rmse_std": float(np.std([r[2] for r in vals], ddof=1)),
            }
            for name, vals in rows.items()
        }
    return {"run_id": run, "trials": trials, "by_k": out}


PARTITION_CONFIGS = ((1, 3), (2, 3), (3, 3), (1, 6))


def partition_ablation(cfg: ExperimentConfig, configs: Sequence[Tuple[int, int]] = PARTITION_CONFIGS,
                       run: int = 0) -> List[Dict]:
    """Token-level RMSE of DDD families under several ``S x M`` splits."""
    seed = run_seed(cfg, run)
    ds = stage_data(cfg, seed)
    proxy = make_proxy(cfg, seed, ds, stage_pmix(cfg, seed, ds) if cfg.proxy == DISTILLED_MIX else None)
    samples = label_correctness(ds.target, ds.data, cfg.eval_samples_per_query, cfg.temperature,
                                rng_mod.derive(seed, EVAL_SAMPLES), max_len=cfg.max_len)
    rows = []
    for s, m in configs:
        fam = stage_drafts(cfg, seed, ds, DraftStrategy(DDD, s, m)).family
        est = stage_estimate(cfg, seed, ds, fam, proxy, samples)
        metrics = evaluate_traces(cfg, seed, est.samples, est.traces)
        rows.append({"split": f"{s}x{m}", "s": s, "m": m, "rmse": metrics["fidelity"]["rmse"],
                     "mean_variance_proxy": metrics["fidelity"]["mean_variance_proxy"]})
    return rows


SWEEP_STRATEGIES = (UNTRAINED, IDD, DDD, FDD, REVERSE_KL)


def strategy_sweep(cfg: ExperimentConfig, kinds: Sequence[str] = SWEEP_STRATEGIES,
                   runs: Optional[Sequence[int]] = None) -> List[Dict]:
    """Fidelity of each draft-training strategy under shared data, proxy and evaluation samples.

    Returns one row per (run, strategy) with the token-level RMSE and the mean
    JSD among drafts (variance proxy) on the evaluation contexts.
    """
    runs = range(cfg.runs) if runs is None else runs
    rows = []
    for run in runs:
        seed = run_seed(cfg, run)
        ds = stage_data(cfg, seed)
        proxy = make_proxy(cfg, seed, ds, stage_pmix(cfg, seed, ds) if cfg.proxy == DISTILLED_MIX else None)
        samples = label_correctness(ds.target, ds.data, cfg.eval_samples_per_query, cfg.temperature,
                                    rng_mod.derive(seed, EVAL_SAMPLES), max_len=cfg.max_len)
        for kind in kinds:
            fam = stage_drafts(cfg, seed, ds, DraftStrategy(kind, cfg.strategy.s, cfg.strategy.m)).family
            est = stage_estimate(cfg, seed, ds, ensemble_family(cfg, seed, fam), proxy, samples)
            fid = evaluate_traces(cfg, seed, est.samples, est.traces)["fidelity"]
            rows.append({"run_id": run, "strategy": kind, "rmse": fid["rmse"],
                         "mean_jsd": fid["mean_variance_proxy"]})
    return rows
