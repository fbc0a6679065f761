"""Serialising experiment reports to JSON, CSV and a markdown comparison table."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

from .pipeline import ExperimentReport, _jsonable

FORMATS = ("json", "csv", "markdown-table")
CSV_FIELDS = ("run_id", "backbone", "strategy", "dataset", "k", "recall", "mrr", "ndcg", "precision",
              "n_users")
TABLE_COLUMNS = (("recall", "Rec"), ("mrr", "MRR"), ("ndcg", "NDCG"), ("precision", "Pre"))


def run_id(report: ExperimentReport) -> str:
    cfg = {k: v for k, v in report.config.items() if k != "output"}
    return hashlib.sha256(json.dumps(_jsonable(cfg), sort_keys=True).encode()).hexdigest()[:12]


def dataset_name(report: ExperimentReport) -> str:
    data = report.config["data"]
    if data["source"] == "synthetic":
        return "synthetic"
    return Path(data["path"]).name if data.get("path") else data["source"]


def csv_rows(report: ExperimentReport) -> list[dict]:
    rid = run_id(report)
    out = []
    for row in report.rows:
        m = row["metrics"]
        out.append({"run_id": rid, "backbone": report.config["model"]["backbone"],
                    "strategy": row["strategy"], "dataset": dataset_name(report),
                    "k": report.config["train"]["k"], "recall": m["recall"], "mrr": m["mrr"],
                    "ndcg": m["ndcg"], "precision": m["precision"], "n_users": m["n_users"]})
    return out


def markdown_table(reports) -> str:
    """Strategy x metric grid; the best value per metric is bolded when more than one row exists."""
    if isinstance(reports, ExperimentReport):
        reports = [reports]
    rows = []
    for rep in reports:
        for row in rep.rows:
            rows.append((rep.config["model"]["backbone"], row["strategy"], row["metrics"]))
    best = {key: max(r[2][key] for r in rows) for key, _ in TABLE_COLUMNS} if rows else {}
    k = reports[0].config["train"]["k"] if reports else 10
    head = "| Model | Strategy | " + " | ".join(f"{label}@{k}" for _, label in TABLE_COLUMNS) + " |"
    lines = [head, "|" + "---|" * (2 + len(TABLE_COLUMNS))]
    for backbone, strategy, metrics in rows:
        cells = []
        for key, _ in TABLE_COLUMNS:
            text = f"{metrics[key]:.4f}"
            if len(rows) > 1 and math.isclose(metrics[key], best[key], rel_tol=0, abs_tol=0):
                text = f"**{text}**"
            cells.append(text)
        lines.append(f"| {backbone} | {strategy} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def emit_report(report: ExperimentReport, out_dir, formats=("json", "csv")) -> list[Path]:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out_dir}: {exc}") from exc
    written = []
    for fmt in formats:
        if fmt not in FORMATS:
            raise ValueError(f"unknown report format {fmt!r}")
        if fmt == "json":
            path = out_dir / "report.json"
            path.write_text(json.dumps(_jsonable(report.to_json()), sort_keys=True, indent=1) + "\n")
        elif fmt == "csv":
            path = out_dir / "metrics.csv"
            fresh = not path.exists() or path.stat().st_size == 0
            with path.open("a", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
                if fresh:
                    writer.writeheader()
                writer.writerows(csv_rows(report))
        else:
            path = out_dir / "metrics.md"
            path.write_text(markdown_table(report))
        written.append(path)
    return written


def load_report(path) -> ExperimentReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return ExperimentReport.from_json(json.loads(path.read_text()))
