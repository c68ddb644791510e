"""Orchestration: theory residual checks and multi-run experiments.

``run_experiment`` writes everything under one output directory:

* ``report.json``: config, fingerprint, per-run metrics and a summary
* ``runs.csv``: one row per run (see ``report.TABLE_COLUMNS``)
* ``scatter.csv``: rmse vs spearman per run
* ``traces/run-NNN.jsonl``, ``labels/run-NNN.jsonl``, ``predictions/run-NNN.jsonl``
* ``logs/run-NNN/member-MM.jsonl``: draft training logs

The report holds no timestamps or host details, so identical config and seed
give identical bytes regardless of worker count.
"""

from __future__ import annotations

import dataclasses
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from drafteu import io
from drafteu import rng as rng_mod
from drafteu.config import ExperimentConfig, config_to_dict, fingerprint
from drafteu.datagen import save_labels
from drafteu.errors import InvalidInputError, TrainingError
from drafteu.estimators import save_traces, upper_bound_terms, eu_two_forms, proxy_eu
from drafteu.evaluation import summarize
from drafteu.experiment import run_single
from drafteu.simplex import kl, mixture

WORKERS_ENV = "DRAFTEU_WORKERS"
REPORT_VERSION = 1

TWO_FORMS, UPPER_BOUND, VARIANCE_BIAS, OSD_ARGMIN = "eu_two_forms", "upper_bound", "variance_bias", "osd_argmin"
IDENTITIES = (TWO_FORMS, UPPER_BOUND, VARIANCE_BIAS, OSD_ARGMIN)


# -- theory checks ------------------------------------------------------------


@dataclass(frozen=True)
class ResidualRow:
    identity: str
    max_residual: float
    trials: int
    passed: bool


@dataclass(frozen=True)
class TheoryCheckResult:
    rows: tuple
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def to_dict(self) -> Dict:
        return {"tolerance": self.tolerance, "passed": self.passed,
                "rows": [dataclasses.asdict(r) for r in self.rows]}


def _random_simplex(gen: np.random.Generator, v: int) -> np.ndarray:
    # mix of flat and spiky Dirichlet draws; strictly positive entries
    alpha = 10.0 ** gen.uniform(-1.5, 1.0)
    p = gen.dirichlet(np.full(v, alpha))
    p = np.maximum(p, 1e-12)
    return p / p.sum()


def _residuals(gen: np.random.Generator, corrupt: bool) -> Dict[str, float]:
    v = int(gen.integers(2, 65))
    k = int(gen.integers(2, 11))
    members = [_random_simplex(gen, v) for _ in range(k)]
    drafts = [_random_simplex(gen, v) for _ in range(int(gen.integers(2, 11)))]
    proxy = _random_simplex(gen, v)
    kl_form, ent_form = eu_two_forms(members)
    lhs, eu, gap = upper_bound_terms(members, drafts)
    rec = proxy_eu(drafts, proxy)
    bias = rec.bias_proxy * (1.01 if corrupt else 1.0)
    # forward-KL objective around the mean: mean KL(p_k||q) = mean KL(p_k||p_bar) + KL(p_bar||q)
    avg = mixture(members)
    q = _random_simplex(gen, v)
    objective = math.fsum(kl(p, q) for p in members) / k
    return {
        TWO_FORMS: abs(kl_form - ent_form),
        UPPER_BOUND: abs(lhs - (eu + gap)),
        VARIANCE_BIAS: abs(rec.estimated_total - (rec.variance_proxy + bias)),
        OSD_ARGMIN: abs(objective - (kl_form + kl(avg, q))),
    }


def verify_theory(trials: int = 1000, seed: int = 0, tolerance: float = 1e-10,
                  corrupt: bool = False) -> TheoryCheckResult:
    """Max absolute residual of each identity over random instances.

    ``corrupt`` scales the bias term by 1.01 before checking the
    variance-plus-bias identity, which must then fail.
    """
    if trials < 1:
        raise InvalidInputError("trials must be >= 1")
    if not tolerance >= 0:
        raise InvalidInputError("tolerance must be nonnegative")
    worst = dict.fromkeys(IDENTITIES, 0.0)
    for t in range(trials):
        res = _residuals(rng_mod.stream(seed, t), corrupt)
        for name, r in res.items():
            worst[name] = max(worst[name], r)
    rows = tuple(ResidualRow(n, worst[n], trials, worst[n] <= tolerance) for n in IDENTITIES)
    return TheoryCheckResult(rows, tolerance)


# -- experiments ------------------------------------------------------------


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise InvalidInputError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise InvalidInputError(f"{WORKERS_ENV} must be >= 1")
    return n


def _guarded(runner: Callable, cfg: ExperimentConfig, run: int) -> Dict:
    try:
        return runner(cfg, run)
    except TrainingError as exc:
        return {"run_id": run, "seed": str(rng_mod.derive(cfg.seed, run)), "status": "failed",
                "error": f"training failure: {exc}"}


def execute_runs(cfg: ExperimentConfig, runner: Callable = run_single, workers: Optional[int] = None) -> List[Dict]:
    """Run every index in ``range(cfg.runs)``; results come back in run order."""
    workers = worker_count() if workers is None else workers
    indices = list(range(cfg.runs))
    if workers == 1 or len(indices) == 1:
        return [_guarded(runner, cfg, r) for r in indices]
    with ProcessPoolExecutor(max_workers=min(workers, len(indices))) as pool:
        futures = [pool.submit(_guarded, runner, cfg, r) for r in indices]
        return [f.result() for f in futures]


def _run_entry(res: Dict) -> Dict:
    if res.get("status") == "failed":
        return {"run_id": res["run_id"], "seed": res["seed"], "status": "failed", "error": res["error"]}
    return {"run_id": res["run_id"], "seed": res["seed"], "status": "ok", "fidelity": res["fidelity"],
            "detection": res["detection"], "rel_flops": res["rel_flops"]}


SUMMARY_KEYS = (("fidelity", "rmse"), ("fidelity", "spearman"), ("fidelity", "ccc"),
                ("fidelity", "mean_variance_proxy"), ("fidelity", "mean_bias_proxy"),
                ("detection", "auroc"), ("detection", "ece"), ("detection", "brier"))


def build_report(cfg: ExperimentConfig, results: Sequence[Dict]) -> Dict:
    runs = [_run_entry(r) for r in results]
    ok = [r for r in runs if r["status"] == "ok"]
    summary = {}
    for section, key in SUMMARY_KEYS:
        vals = [r[section][key] for r in ok if r[section].get(key) is not None]
        summary[key] = summarize(vals) if vals else None
    return {
        "format_version": REPORT_VERSION,
        "config_fingerprint": fingerprint(cfg),
        "config": config_to_dict(cfg),
        "master_seed": str(cfg.seed),
        "seed_policy": "run r uses derive(master_seed, r) for data, training, perturbation and sampling",
        "runs": runs,
        "failed_runs": [r["run_id"] for r in runs if r["status"] == "failed"],
        "summary": summary,
    }


def _write_run_files(out: Path, res: Dict) -> None:
    tag = f"run-{res['run_id']:03d}"
    save_traces(res["traces"], out / "traces" / f"{tag}.jsonl")
    save_labels(res["samples"], out / "labels" / f"{tag}.jsonl")
    io.write_jsonl(out / "predictions" / f"{tag}.jsonl", res["predictions"])
    for i, log in enumerate(res["draft_logs"]):
        io.write_jsonl(out / "logs" / tag / f"member-{i:02d}.jsonl", log)


def run_experiment(cfg: ExperimentConfig, out_dir, runner: Callable = run_single,
                   workers: Optional[int] = None) -> Dict:
    """Execute all runs and write the report files; returns the report document."""
    from drafteu.report import emit_report

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = execute_runs(cfg, runner, workers)
    for res in results:
        if res.get("status") != "failed":
            _write_run_files(out, res)
    report = build_report(cfg, results)
    emit_report(report, "document", out / "report.json")
    emit_report(report, "table", out / "runs.csv")
    emit_report(report, "scatter-data", out / "scatter.csv")
    return report
