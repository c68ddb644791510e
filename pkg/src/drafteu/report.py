"""Report serialization and figures.

Every output is a pure function of the report document (and, for figures,
the per-run files next to it). SVGs are made byte-stable by fixing the
matplotlib hash salt and dropping the date metadata.
"""

from __future__ import annotations

import csv
import io as _io
import json
from pathlib import Path
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from drafteu import io  # noqa: E402
from drafteu.errors import InvalidInputError  # noqa: E402

TABLE = "table"
DOCUMENT = "document"
SCATTER_SVG = "scatter-svg"
SCATTER_DATA = "scatter-data"
FORMATS = (TABLE, DOCUMENT, SCATTER_SVG)

TABLE_COLUMNS = ("run_id", "rmse", "spearman", "ccc", "auroc", "ece", "brier", "rel_flops")
_SOURCES = {"rmse": "fidelity", "spearman": "fidelity", "ccc": "fidelity",
            "auroc": "detection", "ece": "detection", "brier": "detection"}

_SVG_RC = {"svg.hashsalt": "drafteu", "svg.fonttype": "none", "font.family": "DejaVu Sans"}


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def table_rows(report: Dict) -> List[List[str]]:
    rows = []
    for run in sorted(report["runs"], key=lambda r: r["run_id"]):
        row = [run["run_id"]]
        for col in TABLE_COLUMNS[1:]:
            if run.get("status") != "ok":
                row.append(None)
            elif col == "rel_flops":
                row.append(run["rel_flops"])
            else:
                row.append(run[_SOURCES[col]].get(col))
        rows.append([_cell(v) for v in row])
    return rows


def _csv_text(header, rows) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def scatter_points(report: Dict) -> List[tuple]:
    """(run_id, rmse, spearman) for runs where both are defined."""
    pts = []
    for run in sorted(report["runs"], key=lambda r: r["run_id"]):
        if run.get("status") != "ok":
            continue
        f = run["fidelity"]
        if f.get("rmse") is not None and f.get("spearman") is not None:
            pts.append((run["run_id"], f["rmse"], f["spearman"]))
    return pts


def _save_svg(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def scatter_svg(report: Dict, path) -> Path:
    """One marker per run, each in its own ``<g id="run-N">`` group."""
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        for run_id, x, y in scatter_points(report):
            ax.plot([x], [y], "o", color="tab:blue", gid=f"run-{run_id}")
        ax.set_xlabel("RMSE (estimated vs ground-truth EU)")
        ax.set_ylabel("Spearman correlation")
        ax.set_title("Per-run fidelity")
        fig.tight_layout()
        return _save_svg(fig, Path(path))


def emit_report(report: Dict, fmt: str, path) -> Path:
    """Serialize ``report`` in ``fmt`` to ``path``; re-emission is byte-identical."""
    path = Path(path)
    if fmt == DOCUMENT:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report, sort_keys=True, indent=2, allow_nan=False) + "\n")
        return path
    if fmt == TABLE:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(_csv_text(TABLE_COLUMNS, table_rows(report)))
        return path
    if fmt == SCATTER_DATA:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(_csv_text(("run_id", "rmse", "spearman"), [[_cell(v) for v in p] for p in scatter_points(report)]))
        return path
    if fmt == SCATTER_SVG:
        return scatter_svg(report, path)
    raise InvalidInputError(f"unknown report format {fmt!r}; expected one of {', '.join(FORMATS)}")


# -- extra figures ------------------------------------------------------------


def eu_scatter_svg(run_dir, path) -> Optional[Path]:
    """Estimated vs ground-truth token EU pooled over every run's traces."""
    files = sorted(Path(run_dir).glob("traces/run-*.jsonl"))
    pairs = [(r["estimated_total"], r["ground_truth"]) for f in files for r in io.read_jsonl(f)
             if r["estimated_total"] is not None and r["ground_truth"] is not None]
    if not pairs:
        return None
    est, gt = np.array(pairs).T
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(4.5, 4.0))
        ax.scatter(gt, est, s=6, alpha=0.4, color="tab:blue", linewidths=0)
        hi = float(max(est.max(), gt.max())) * 1.05 or 1.0
        ax.plot([0, hi], [0, hi], "--", color="gray", linewidth=1)
        ax.set_xlabel("Ground-truth EU (nats)")
        ax.set_ylabel("Estimated EU (nats)")
        ax.set_title("Token-level EU")
        fig.tight_layout()
        return _save_svg(fig, Path(path))


def reliability_svg(run_dir, path, n_bins: int = 10) -> Optional[Path]:
    """Reliability diagram of the calibrated incorrectness probabilities."""
    files = sorted(Path(run_dir).glob("predictions/run-*.jsonl"))
    rows = [r for f in files for r in io.read_jsonl(f)]
    if not rows:
        return None
    p = np.array([r["prob_incorrect"] for r in rows])
    y = np.array([r["incorrect"] for r in rows])
    bins = np.minimum((p * n_bins).astype(int), n_bins - 1)
    centers, freq = [], []
    for b in range(n_bins):
        mask = bins == b
        if mask.any():
            centers.append(p[mask].mean())
            freq.append(y[mask].mean())
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(4.0, 4.0))
        ax.plot([0, 1], [0, 1], "--", color="gray", linewidth=1)
        ax.plot(centers, freq, "o-", color="tab:red")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("Predicted P(incorrect)")
        ax.set_ylabel("Observed incorrect rate")
        ax.set_title("Reliability")
        fig.tight_layout()
        return _save_svg(fig, Path(path))


def render_figures(run_dir, out_dir) -> List[Path]:
    out = Path(out_dir)
    made = [eu_scatter_svg(run_dir, out / "eu_scatter.svg"), reliability_svg(run_dir, out / "reliability.svg")]
    return [m for m in made if m is not None]
