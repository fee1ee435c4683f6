"""Comparison tables: sensitivity, MAP and F1 in percent, best per column marked."""
from __future__ import annotations

import csv
import io
from collections.abc import Sequence
from dataclasses import dataclass

from .metrics import AggregateReport

COLUMNS = (("Sensitivity", "mean_sensitivity"), ("MAP", "map"), ("F1", "mean_f1"))
BEST_MARK = "*"


class ReportError(ValueError):
    pass


def percent(value: float | None) -> str:
    return "n/a" if value is None else f"{100 * value:.2f}"


@dataclass
class ComparisonTable:
    corner: str
    labels: list[str]
    values: list[list[str]]  # formatted percent strings, row-major
    best: list[list[bool]]
    k: int

    @property
    def headers(self) -> list[str]:
        return [self.corner] + [name for name, _ in COLUMNS]

    def row(self, label: str) -> list[str]:
        return self.values[self.labels.index(label)]

    def is_best(self, label: str, column: str) -> bool:
        col = [name for name, _ in COLUMNS].index(column)
        return self.best[self.labels.index(label)][col]

    def to_text(self) -> str:
        cells = [
            [label] + [v + (BEST_MARK if b else "") for v, b in zip(vals, flags)]
            for label, vals, flags in zip(self.labels, self.values, self.best)
        ]
        widths = [max(len(h), *(len(r[i]) for r in cells)) for i, h in enumerate(self.headers)]
        def fmt(row):
            first = row[0].ljust(widths[0])
            rest = [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
            return "  ".join([first, *rest]).rstrip()
        rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
        lines = [fmt(self.headers), rule, *(fmt(r) for r in cells), rule,
                 f"k = {self.k}; {BEST_MARK} marks the best value per column"]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model"] + [name for name, _ in COLUMNS] + [f"best_{name}" for name, _ in COLUMNS])
        for label, vals, flags in zip(self.labels, self.values, self.best):
            writer.writerow([label, *vals, *(int(b) for b in flags)])
        return buf.getvalue()


def compare_runs(
    reports: Sequence[AggregateReport], corner: str = "Model \\ in %", merge_identical: bool = False
) -> ComparisonTable:
    """Build the comparison table, rows in input order.

    Best-per-column is decided on the displayed (two-decimal percent)
    values, so rows that read the same are highlighted together. With
    ``merge_identical`` adjacent rows with equal displayed values collapse
    into one row labelled "X & Y".
    """
    if not reports:
        raise ReportError("nothing to compare")
    ks = {r.k for r in reports}
    if len(ks) > 1:
        raise ReportError(f"cannot compare runs with different k: {sorted(ks)}")
    labels: list[str] = []
    values: list[list[str]] = []
    for r in reports:
        row = [percent(getattr(r, attr)) for _, attr in COLUMNS]
        if merge_identical and values and values[-1] == row:
            labels[-1] = f"{labels[-1]} & {r.model_label}"
            continue
        labels.append(r.model_label)
        values.append(row)
    best = [[False] * len(COLUMNS) for _ in labels]
    for c in range(len(COLUMNS)):
        numeric = [float(row[c]) for row in values if row[c] != "n/a"]
        if not numeric:
            continue
        top = max(numeric)
        for i, row in enumerate(values):
            best[i][c] = row[c] != "n/a" and float(row[c]) == top
    return ComparisonTable(corner, labels, values, best, ks.pop())


def render_report(report: AggregateReport) -> str:
    """Single-run summary table with the five macro-averaged metrics."""
    rows = [
        ("Sensitivity", report.mean_sensitivity),
        ("MAP", report.map),
        ("F1", report.mean_f1),
        ("Precision", report.mean_precision),
        ("Recall", report.mean_recall),
    ]
    width = max(len(name) for name, _ in rows)
    lines = [f"{report.model_label or 'run'} (k = {report.k}, in %)"]
    lines += [f"{name.ljust(width)}  {percent(v):>6}" for name, v in rows]
    lines.append(f"evaluated: {report.n_requirements_evaluated}, excluded (empty gold): {report.n_excluded}")
    if not report.defined:
        lines.append("no requirement with gold segments; means undefined")
    return "\n".join(lines) + "\n"
