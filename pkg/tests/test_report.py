import copy
import re

import pytest

from drafteu.errors import InvalidInputError
from drafteu.report import TABLE_COLUMNS, emit_report, render_figures, scatter_points, table_rows


def fake_report(n):
    runs = [{"run_id": i, "seed": str(i), "status": "ok",
             "fidelity": {"rmse": 0.1 + 0.01 * i, "spearman": 0.5 + 0.05 * i, "ccc": 0.3},
             "detection": {"auroc": 0.7, "ece": 0.05, "brier": 0.2}, "rel_flops": 1.08} for i in range(n)]
    return {"format_version": 1, "runs": runs, "failed_runs": [], "summary": {}}


def test_table_layout(tmp_path):
    report = fake_report(3)
    report["runs"].append({"run_id": 3, "seed": "3", "status": "failed", "error": "training failure"})
    lines = emit_report(report, "table", tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == ",".join(TABLE_COLUMNS)
    assert len(lines) == 5
    assert lines[1].split(",")[0] == "0" and lines[1].split(",")[-1] == "1.08"
    assert lines[4] == "3,,,,,,,"
    assert table_rows(report)[0][1] == repr(0.1)


def test_document_and_reemission_identical(tmp_path):
    report = fake_report(2)
    for fmt in ("table", "document", "scatter-svg"):
        a = emit_report(report, fmt, tmp_path / f"a-{fmt}").read_bytes()
        b = emit_report(copy.deepcopy(report), fmt, tmp_path / f"b-{fmt}").read_bytes()
        assert a == b


def test_scatter_svg_one_group_per_run(tmp_path):
    svg = emit_report(fake_report(5), "scatter-svg", tmp_path / "s.svg").read_text()
    ids = re.findall(r'<g id="(run-\d+)"', svg)
    assert ids == [f"run-{i}" for i in range(5)]
    assert "RMSE" in svg and "Spearman" in svg
    assert len(scatter_points(fake_report(5))) == 5


def test_unknown_format(tmp_path):
    with pytest.raises(InvalidInputError):
        emit_report(fake_report(1), "pdf", tmp_path / "x")


def test_figures_from_run_files(tmp_path):
    from drafteu import io

    io.write_jsonl(tmp_path / "traces" / "run-000.jsonl",
                   [{"estimated_total": 0.1 * i, "ground_truth": 0.12 * i} for i in range(5)])
    io.write_jsonl(tmp_path / "predictions" / "run-000.jsonl",
                   [{"prob_incorrect": 0.1 * i, "incorrect": i % 2} for i in range(10)])
    figs = render_figures(tmp_path, tmp_path / "fig")
    assert [f.name for f in figs] == ["eu_scatter.svg", "reliability.svg"]
    first = [f.read_bytes() for f in figs]
    assert [f.read_bytes() for f in render_figures(tmp_path, tmp_path / "fig")] == first
    assert render_figures(tmp_path / "empty", tmp_path / "none") == []
