"""Matplotlib figures written next to the tabular reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import AggregateReport  # noqa: E402
from .report import COLUMNS, ComparisonTable  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def plot_comparison(table: ComparisonTable, path: str | Path) -> Path:
    """Grouped bars, one group per metric, one bar per model."""
    path = Path(path)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(max(5.0, 1.2 * len(table.labels) + 3), 3.4))
        n = len(table.labels)
        width = 0.8 / n
        x = np.arange(len(COLUMNS))
        for i, (label, vals) in enumerate(zip(table.labels, table.values)):
            heights = [float(v) if v != "n/a" else 0.0 for v in vals]
            bars = ax.bar(x + (i - (n - 1) / 2) * width, heights, width, label=label)
            for bar, best in zip(bars, table.best[i]):
                if best:
                    bar.set_edgecolor("black")
                    bar.set_linewidth(1.2)
        ax.set_xticks(x, [name for name, _ in COLUMNS])
        ax.set_ylabel("%")
        ax.set_title(f"Top-{table.k} comparison")
        ax.legend(loc="upper left", bbox_to_anchor=(1.0, 1.0), frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_per_requirement(report: AggregateReport, path: str | Path) -> Path:
    """Histograms of per-requirement sensitivity and AP."""
    path = Path(path)
    sens = [e.sensitivity for e in report.per_requirement]
    ap = [e.ap for e in report.per_requirement]
    bins = np.linspace(0.0, 1.0, 11)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(6.4, 2.6), sharey=True)
        for ax, values, title in zip(axes, (sens, ap), ("Sensitivity", "AP")):
            ax.hist(values, bins=bins, color="0.35", edgecolor="white")
            ax.set_title(f"{title}@{report.k}")
            ax.set_xlim(0, 1)
        axes[0].set_ylabel("requirements")
        fig.suptitle(report.model_label or "run", fontsize=10)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
