"""Report figures rendered to files next to the CSV/JSON outputs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

LOSS_COLUMNS = ("metric_global", "metric_local", "cls", "mm", "cmm", "total")


def save_loss_curves(metrics_csv, out_png) -> Path:
    """Per-step loss components from a metrics.csv, one line per component."""
    steps = []
    series = {name: [] for name in LOSS_COLUMNS}
    with open(metrics_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            for name in LOSS_COLUMNS:
                cell = row[name]
                series[name].append(float(cell) if cell else np.nan)
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for name in LOSS_COLUMNS:
        values = np.asarray(series[name])
        if np.all(np.isnan(values)):
            continue
        ax.plot(steps, values, label=name, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title("training loss components")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def save_cmc_curve(cmc: dict, out_png, title: str = "CMC") -> Path:
    """CMC@k bars from a {rank: fraction} mapping."""
    ranks = sorted(cmc)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.bar([f"top-{r}" for r in ranks], [cmc[r] for r in ranks], color="#4878a8")
    ax.set_ylim(0, 1.0)
    ax.set_ylabel("fraction of queries")
    ax.set_title(title)
    for i, r in enumerate(ranks):
        ax.text(i, cmc[r] + 0.02, f"{cmc[r]:.2f}", ha="center", fontsize=9)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def save_ablation_chart(rows: list, out_png) -> Path:
    """Grouped rank-1/mAP bars per training variant.

    ``rows`` holds dicts with keys variant, rank1, map.
    """
    variants = [r["variant"] for r in rows]
    x = np.arange(len(variants))
    width = 0.38
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    ax.bar(x - width / 2, [r["rank1"] for r in rows], width, label="rank-1")
    ax.bar(x + width / 2, [r["map"] for r in rows], width, label="mAP")
    ax.set_xticks(x, variants)
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.set_title("variant comparison (global-feature retrieval)")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def save_alignment_figure(distance_matrix, path_steps, out_png) -> Path:
    """Stripe-distance heatmap with the shortest path drawn over it."""
    d = np.asarray(distance_matrix)
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    im = ax.imshow(d, cmap="viridis", vmin=0.0, vmax=1.0)
    ys = [i for i, _ in path_steps]
    xs = [j for _, j in path_steps]
    ax.plot(xs, ys, color="white", linewidth=2.0, marker="o", markersize=4)
    ax.set_xlabel("stripe of image B")
    ax.set_ylabel("stripe of image A")
    ax.set_title("aligned shortest path")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)
