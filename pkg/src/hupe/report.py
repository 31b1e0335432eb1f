"""Metric reports: JSON serialization plus CSV and rendered figures.

The JSON schema is the interchange format:
    {"images": {name: {metric: value}}, "aggregate": {metric: {"mean": v,
    "std": v}}, "count": n}
A per-image CSV and a summary PNG are written next to the JSON so results
can be eyeballed without extra tooling; a loss-curve PNG is rendered from
training JSONL logs the same way.
"""

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def build_report(per_image: dict[str, dict[str, float]]) -> dict:
    """Aggregate per-image metric maps into the report structure."""
    names = sorted({m for vals in per_image.values() for m in vals})
    aggregate = {}
    for metric in names:
        vals = np.array([v[metric] for v in per_image.values() if metric in v])
        aggregate[metric] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return {"images": per_image, "aggregate": aggregate, "count": len(per_image)}


def write_report(report: dict, path, figures: bool = True) -> list[Path]:
    """Write the JSON report plus CSV and figure siblings.

    Returns the list of files written. `<stem>.csv` holds one row per image;
    `<stem>.png` shows per-metric value distributions.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=1, sort_keys=True))
    written = [path]

    metrics = sorted(report["aggregate"])
    csv_path = path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image"] + metrics)
        for name in sorted(report["images"]):
            vals = report["images"][name]
            writer.writerow([name] + [vals.get(m, "") for m in metrics])
    written.append(csv_path)

    if figures and metrics:
        fig, axes = plt.subplots(
            1, len(metrics), figsize=(3.2 * len(metrics), 3.2), squeeze=False
        )
        for ax, metric in zip(axes[0], metrics):
            vals = [v[metric] for v in report["images"].values() if metric in v]
            ax.boxplot(vals, widths=0.5)
            ax.scatter(np.full(len(vals), 1.0), vals, s=12, alpha=0.6, color="tab:blue")
            agg = report["aggregate"][metric]
            ax.set_title(f"{metric}\nmean {agg['mean']:.4g} ± {agg['std']:.3g}")
            ax.set_xticks([])
        fig.tight_layout()
        fig_path = path.with_suffix(".png")
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)
        written.append(fig_path)
    return written


def plot_training_log(jsonl_path, out_path) -> Path | None:
    """Render loss curves from a JSONL training log; one panel per phase."""
    jsonl_path = Path(jsonl_path)
    records = []
    with open(jsonl_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        return None
    phases = []
    for rec in records:
        if rec.get("phase") not in phases:
            phases.append(rec.get("phase"))
    fig, axes = plt.subplots(1, len(phases), figsize=(4.5 * len(phases), 3.4),
                             squeeze=False)
    for ax, phase in zip(axes[0], phases):
        rows = [r for r in records if r.get("phase") == phase]
        keys = sorted({k for r in rows for k in r if k.startswith(("l_", "inner_", "outer_"))})
        for key in keys:
            steps = [r["step"] for r in rows if key in r]
            vals = [r[key] for r in rows if key in r]
            ax.plot(steps, vals, label=key, linewidth=1.2)
        ax.set_title(phase)
        ax.set_xlabel("step")
        ax.set_yscale("log")
        if keys:
            ax.legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
