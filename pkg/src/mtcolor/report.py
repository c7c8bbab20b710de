"""Report files: delimited per-image rows, a JSON summary, and matplotlib
figures rendered alongside."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .metrics import MetricReport


def write_metric_report(report: MetricReport, out_dir) -> dict[str, Path]:
    """Write report.csv, summary.json, and one histogram figure per metric.

    Returns the paths that were written, keyed by artifact name.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    csv_path = out_dir / "report.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["image_id", *report.metrics])
        writer.writeheader()
        for row in report.rows:
            writer.writerow({k: row.get(k) for k in ["image_id", *report.metrics]})
    paths["csv"] = csv_path

    summary_path = out_dir / "summary.json"
    summary_path.write_text(json.dumps(
        {"summary": report.summary, "config": report.config,
         "rows": len(report.rows)}, indent=2))
    paths["summary"] = summary_path

    for metric in report.metrics:
        values = [row[metric] for row in report.rows if row.get(metric) is not None]
        fig, ax = plt.subplots(figsize=(5, 3.2))
        if values:
            ax.hist(values, bins=min(20, max(5, len(values) // 4)),
                    color="#4477aa", edgecolor="white")
            stats = report.summary[metric]
            ax.axvline(stats["mean"], color="#cc3311", linestyle="--",
                       label=f"mean {stats['mean']:.3f}")
            ax.legend(loc="best", fontsize=8)
        ax.set_xlabel(metric)
        ax.set_ylabel("images")
        ax.set_title(f"{metric} over {len(values)} images")
        fig.tight_layout()
        fig_path = out_dir / f"fig_{metric}.png"
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)
        paths[f"fig_{metric}"] = fig_path
    return paths


def write_ablation_report(variant_summaries: dict[str, dict], out_dir,
                          config=None) -> dict[str, Path]:
    """Variant comparison: CSV + JSON + grouped bar figure per metric."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    variants = list(variant_summaries)
    metrics = sorted({m for s in variant_summaries.values() for m in s})

    csv_path = out_dir / "ablation.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", *metrics])
        for v in variants:
            writer.writerow([v, *[variant_summaries[v].get(m) for m in metrics]])
    paths["csv"] = csv_path

    json_path = out_dir / "ablation.json"
    json_path.write_text(json.dumps(
        {"variants": variant_summaries, "config": config or {}}, indent=2))
    paths["summary"] = json_path

    for metric in metrics:
        values = [variant_summaries[v].get(metric) for v in variants]
        fig, ax = plt.subplots(figsize=(5, 3.2))
        shown = [(v, val) for v, val in zip(variants, values) if val is not None]
        if shown:
            names, vals = zip(*shown)
            ax.bar(names, vals, color="#4477aa")
            for i, val in enumerate(vals):
                ax.text(i, val, f"{val:.3f}", ha="center", va="bottom", fontsize=8)
        ax.set_ylabel(metric)
        ax.set_title(f"{metric} by variant")
        fig.tight_layout()
        fig_path = out_dir / f"fig_ablation_{metric}.png"
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)
        paths[f"fig_{metric}"] = fig_path
    return paths


def save_sample_grid(images, out_path, titles=None, columns: int = 8) -> Path:
    """Contact sheet of uint8 RGB images (debug/report artifact)."""
    out_path = Path(out_path)
    n = len(images)
    columns = max(1, min(columns, n))
    rows = (n + columns - 1) // columns
    fig, axes = plt.subplots(rows, columns, figsize=(1.6 * columns, 1.8 * rows))
    axes = [axes] if rows * columns == 1 else list(axes.reshape(-1))
    for i, ax in enumerate(axes):
        ax.axis("off")
        if i < n:
            ax.imshow(images[i], interpolation="nearest")
            if titles:
                ax.set_title(titles[i], fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
