"""Command-line entry point.

Stage subcommands (gen-data, train-pmix, train-drafts, estimate, evaluate)
work on a single run, index 0, inside one work directory, so chaining them
reproduces run 0 of ``run``. Exit codes: 0 success, 1 invalid input,
2 theory-check failure, 3 training failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import List, Optional

from drafteu import io
from drafteu.config import ExperimentConfig, config_to_dict, load_config
from drafteu.datagen import load_corpus, load_dataset, load_labels, save_corpus, save_dataset, save_labels
from drafteu.errors import InvalidInputError, TrainingError
from drafteu.estimators import DISTILLED_MIX, load_traces, save_traces
from drafteu.evaluation import COST_MODES, relative_flops
from drafteu import experiment as exp
from drafteu.models import DRAFT_FAMILY, TARGET_FAMILY
from drafteu.pipeline import run_experiment, verify_theory
from drafteu.report import FORMATS, TABLE, emit_report, render_figures

EXIT_OK, EXIT_INVALID, EXIT_THEORY, EXIT_TRAINING = 0, 1, 2, 3
STAGE_RUN = 0

_OUTPUT_NAMES = {"table": "report.csv", "document": "report.document.json", "scatter-svg": "scatter.svg"}


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from exc
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from exc
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "runs", None) is not None:
        overrides["runs"] = args.runs
    if getattr(args, "cost_mode", None) is not None:
        overrides["cost_mode"] = args.cost_mode
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


# -- stage persistence --------------------------------------------------------


def _save_data_stage(ds: exp.DataStage, work: Path) -> None:
    d = work / "data"
    save_dataset(ds.data, d / "dataset.jsonl")
    save_corpus(ds.corpus, d / "corpus.jsonl")
    save_corpus(ds.pmix_corpus, d / "pmix_corpus.jsonl")
    io.save_model(ds.target, d / "target.json")
    io.save_family(ds.teacher_family, d / "teacher_family")
    io.write_json(d / "covered.json", ds.covered)


def _load_data_stage(work: Path) -> exp.DataStage:
    d = work / "data"
    if not (d / "dataset.jsonl").exists():
        raise InvalidInputError(f"{d} has no data stage; run gen-data first")
    return exp.DataStage(
        load_dataset(d / "dataset.jsonl"),
        io.read_json(d / "covered.json"),
        io.load_model(d / "target.json"),
        io.load_family(d / "teacher_family", TARGET_FAMILY),
        load_corpus(d / "corpus.jsonl"),
        load_corpus(d / "pmix_corpus.jsonl"),
    )


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise InvalidInputError(f"missing {path}; run {stage} first")
    return path


# -- subcommands ------------------------------------------------------------


def cmd_verify_theory(args) -> int:
    res = verify_theory(args.trials, args.seed or 0, args.tolerance, corrupt=args.self_test)
    doc = res.to_dict()
    if args.out:
        io.write_json(Path(args.out) / "theory.json", doc)
    print(f"{'identity':<14} {'max_residual':>14} {'trials':>7}  status")
    for row in res.rows:
        print(f"{row.identity:<14} {row.max_residual:>14.3e} {row.trials:>7}  {'pass' if row.passed else 'FAIL'}")
    return EXIT_OK if res.passed else EXIT_THEORY


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    work = Path(args.out)
    _save_data_stage(exp.stage_data(cfg, exp.run_seed(cfg, STAGE_RUN)), work)
    io.write_json(work / "config.json", config_to_dict(cfg))
    print(f"wrote data stage to {work / 'data'}")
    return EXIT_OK


def cmd_train_pmix(args) -> int:
    cfg = _config(args)
    work = Path(args.out)
    pmix = exp.stage_pmix(cfg, exp.run_seed(cfg, STAGE_RUN), _load_data_stage(work))
    io.save_model(pmix, work / "pmix.json")
    print(f"wrote {work / 'pmix.json'}")
    return EXIT_OK


def cmd_train_drafts(args) -> int:
    cfg = _config(args)
    work = Path(args.out)
    run = exp.stage_drafts(cfg, exp.run_seed(cfg, STAGE_RUN), _load_data_stage(work))
    io.save_family(run.family, work / "drafts")
    for i, log in enumerate(run.logs):
        io.write_jsonl(work / "drafts" / "logs" / f"member-{i:02d}.jsonl", log)
    print(f"wrote {len(run.family)} drafts to {work / 'drafts'}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = _config(args)
    work = Path(args.out)
    seed = exp.run_seed(cfg, STAGE_RUN)
    ds = _load_data_stage(work)
    _require(work / "drafts", "train-drafts")
    drafts = exp.ensemble_family(cfg, seed, io.load_family(work / "drafts", DRAFT_FAMILY))
    pmix = io.load_model(_require(work / "pmix.json", "train-pmix")) if cfg.proxy == DISTILLED_MIX else None
    est = exp.stage_estimate(cfg, seed, ds, drafts, exp.make_proxy(cfg, seed, ds, pmix))
    save_traces(est.traces, work / "estimate" / "traces.jsonl")
    save_labels(est.samples, work / "estimate" / "labels.jsonl")
    print(f"wrote {len(est.traces)} traces to {work / 'estimate'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    work = Path(args.out)
    traces = load_traces(_require(work / "estimate" / "traces.jsonl", "estimate"))
    samples = load_labels(work / "estimate" / "labels.jsonl")
    metrics = exp.evaluate_traces(cfg, exp.run_seed(cfg, STAGE_RUN), samples, traces)
    ds = _load_data_stage(work)
    drafts = exp.ensemble_family(cfg, exp.run_seed(cfg, STAGE_RUN), io.load_family(work / "drafts", DRAFT_FAMILY))
    method, baseline = exp.cost_entries(cfg, ds, len(drafts), drafts[0].params.size)
    doc = {"fidelity": metrics["fidelity"], "detection": metrics["detection"],
           "rel_flops": relative_flops(method, baseline)}
    io.write_json(work / "metrics.json", doc)
    io.write_jsonl(work / "predictions.jsonl", metrics["predictions"])
    print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    report = run_experiment(cfg, args.out)
    for row in report["runs"]:
        if row["status"] == "ok":
            f = row["fidelity"]
            print(f"run {row['run_id']}: rmse={f['rmse']:.4f} spearman={f['spearman']} auroc={row['detection']['auroc']}")
        else:
            print(f"run {row['run_id']}: {row['error']}", file=sys.stderr)
    print(f"report: {Path(args.out) / 'report.json'}")
    return EXIT_TRAINING if report["failed_runs"] else EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.out)
    src = _require(run_dir / "report.json", "run")
    try:
        report = io.read_json(src)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{src}: invalid JSON ({exc})") from exc
    if "runs" not in report:
        raise InvalidInputError(f"{src} is not a run report")
    path = emit_report(report, args.format, run_dir / _OUTPUT_NAMES[args.format])
    figures = render_figures(run_dir, run_dir / "figures")
    if args.format == TABLE:
        sys.stdout.write(path.read_text())
    print(f"wrote {path}")
    for fig in figures:
        print(f"wrote {fig}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drafteu", description="Draft-ensemble epistemic uncertainty at toy scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, config=True, out_required=True):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", help="experiment config (JSON)")
            p.add_argument("--seed", type=_u64, help="master seed override")
            p.add_argument("--cost-mode", choices=COST_MODES, help="cost accounting override")
        p.add_argument("--out", required=out_required, help="output / work directory")
        p.set_defaults(func=fn)
        return p

    p = add("verify-theory", cmd_verify_theory, "residual checks of the EU identities", config=False, out_required=False)
    p.add_argument("--trials", type=_positive, default=1000)
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--tolerance", type=float, default=1e-10)
    p.add_argument("--self-test", action="store_true", help="corrupt one term; the check must fail")
    add("gen-data", cmd_gen_data, "task, base target and corpora for run 0")
    add("train-pmix", cmd_train_pmix, "distill the proxy mean model")
    add("train-drafts", cmd_train_drafts, "train the draft family")
    add("estimate", cmd_estimate, "token-level EU traces")
    add("evaluate", cmd_evaluate, "fidelity, detection and cost metrics")
    p = add("run", cmd_run, "full pipeline over all runs")
    p.add_argument("--runs", type=_positive, help="number of runs override")
    p = add("report", cmd_report, "emit a report and figures from a run directory", config=False)
    p.add_argument("--format", choices=FORMATS, default=TABLE)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        return args.func(args)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
