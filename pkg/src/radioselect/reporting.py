"""Deterministic report emission: JSON for machines, an aligned text table
for the console. Two emissions of the same reports are byte-identical."""

import json

from .errors import UsageError
from .metrics import EvalReport

__all__ = ["emit_report", "parse_reports"]

_COLUMNS = ("task", "label", "threshold", "n", "accuracy", "sensitivity",
            "specificity", "auc")


def _report_dict(report: EvalReport) -> dict:
    return {
        "task": report.task,
        "label": report.label,
        "fingerprint": report.fingerprint,
        "threshold": report.threshold,
        "counts": {k: int(report.counts[k]) for k in ("tp", "fp", "tn", "fn")},
        "accuracy": report.accuracy,
        "sensitivity": report.sensitivity,
        "specificity": report.specificity,
        "auc": report.auc,
        "seeds": report.seeds,
        "spread": report.spread or {},
    }


def _metric_cell(report: EvalReport, name: str) -> str:
    value = getattr(report, name)
    if value is None:
        return "-"
    cell = f"{value:.4f}"
    if report.spread and name in report.spread:
        cell += f"±{report.spread[name]:.4f}"
    return cell


def _text_table(reports) -> str:
    rows = [list(_COLUMNS)]
    for r in reports:
        rows.append([
            r.task,
            r.label or "-",
            "-" if r.threshold is None else f"{r.threshold:.3f}",
            str(r.n),
            _metric_cell(r, "accuracy"),
            _metric_cell(r, "sensitivity"),
            _metric_cell(r, "specificity"),
            _metric_cell(r, "auc"),
        ])
    widths = [max(len(row[i]) for row in rows) for i in range(len(_COLUMNS))]
    lines = []
    for k, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def emit_report(reports, format: str = "json") -> bytes:
    """Serialize EvalReports; format is "json" or "text"."""
    reports = list(reports)
    if format == "json":
        payload = json.dumps([_report_dict(r) for r in reports], sort_keys=True,
                             indent=2, allow_nan=False)
        return (payload + "\n").encode("utf-8")
    if format == "text":
        return _text_table(reports).encode("utf-8")
    raise UsageError(f"unsupported report format {format!r}; use 'json' or 'text'")


def parse_reports(data: bytes) -> list:
    """Inverse of emit_report(..., "json")."""
    entries = json.loads(data.decode("utf-8"))
    return [
        EvalReport(
            task=e["task"],
            threshold=e["threshold"],
            counts=e["counts"],
            accuracy=e["accuracy"],
            sensitivity=e["sensitivity"],
            specificity=e["specificity"],
            auc=e["auc"],
            label=e.get("label", ""),
            fingerprint=e.get("fingerprint", ""),
            seeds=e.get("seeds"),
            spread=e.get("spread") or {},
        )
        for e in entries
    ]
