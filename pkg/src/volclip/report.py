"""Figure rendering for the CLI report paths.

Every plot goes to a file next to the delimited output it illustrates; the
library modules themselves stay plot-free.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .stats import MEAN_METRICS, MetricsReport


def save_metrics_figure(report: MetricsReport, path) -> None:
    """Mean of the four key metrics with bootstrap error bars."""
    means = [report.means[m] for m in MEAN_METRICS]
    stds = [report.bootstrap.get(m, {}).get("std", 0.0) for m in MEAN_METRICS]
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(MEAN_METRICS))
    ax.bar(x, means, yerr=stds, capsize=4, color="#4878cf")
    ax.set_xticks(x)
    ax.set_xticklabels([m.upper() for m in MEAN_METRICS])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("mean over abnormalities")
    ax.set_title(f"classification metrics: {report.model_tag or 'model'}")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_roc_figure(curves: dict, path) -> None:
    """curves: abnormality -> list of RocPoint."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, points in curves.items():
        fpr = [p.fpr for p in points]
        tpr = [p.tpr for p in points]
        ax.plot(fpr, tpr, label=name, linewidth=1.2)
    ax.plot([0, 1], [0, 1], "k--", linewidth=0.8, label="chance")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("ROC curves")
    if len(curves) <= 10:
        ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_sweep_figure(rows: list, path) -> None:
    """Grouped bars of the four mean metrics per prompt template."""
    ids = [r["template_id"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.2
    x = np.arange(len(ids), dtype=float)
    for j, metric in enumerate(MEAN_METRICS):
        vals = [r[f"mean_{metric}"] for r in rows]
        ax.bar(x + (j - 1.5) * width, vals, width, label=metric)
    best = next(r for r in rows if r["best"])
    ax.set_xticks(x)
    ax.set_xticklabels([f"prompt {i}" for i in ids])
    ax.set_ylim(0, 1.05)
    ax.set_title(f"prompt sweep (best by accuracy: prompt {best['template_id']})")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_fraction_figure(rows: list, path, metric: str = "mean_auroc") -> None:
    fractions = [r["fraction"] for r in rows]
    values = [r.get(metric) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    if any(v is not None for v in values):
        ax.plot(fractions, values, "o-", color="#4878cf", label=metric)
        stds = [r.get(f"{metric}_std") for r in rows]
        if all(s is not None for s in stds):
            lo = [v - s for v, s in zip(values, stds)]
            hi = [v + s for v, s in zip(values, stds)]
            ax.fill_between(fractions, lo, hi, alpha=0.25, color="#4878cf",
                            label="±1 bootstrap std")
        ax.legend(fontsize=8)
    ax.set_xlabel("training-set fraction (patients)")
    ax.set_ylabel(metric)
    ax.set_title("dataset-fraction ablation")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_loss_figure(history: list, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([h["step"] for h in history], [h["loss"] for h in history],
            linewidth=1.0, color="#d65f5f")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_csv(rows: list, path, fieldnames=None) -> None:
    """Delimited twin of each figure."""
    if not rows:
        Path(path).write_text("")
        return
    fieldnames = fieldnames or list(rows[0].keys())
    with Path(path).open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fieldnames})
