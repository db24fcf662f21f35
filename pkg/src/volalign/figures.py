"""Matplotlib figure rendering for the CLI report paths.

All functions take already-computed data and write PNG files; they never
touch the model. The Agg backend is forced so rendering works headless.
"""

from __future__ import annotations

from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_loss_curves(history: List[dict], path, title: str = "training loss"):
    """history: list of per-step dicts (as written to the loss CSV)."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    steps = np.arange(len(history))
    keys = [k for k in ("total", "global", "local", "global_semantic",
                        "local_semantic") if any(h.get(k, 0.0) for h in history)]
    for k in keys:
        ax.plot(steps, [h.get(k, 0.0) for h in history], label=k, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metric_bars(reports: Dict[str, dict], metric: str, path,
                     title: str = ""):
    """Grouped bars: one group per run label, one bar per disease AUC."""
    labels = list(reports)
    diseases = sorted({d for rep in reports.values()
                       for d in rep.get("per_disease_auc", {})})
    fig, ax = plt.subplots(figsize=(7, 4.5))
    width = 0.8 / max(1, len(diseases) + 1)
    x = np.arange(len(labels))
    for j, d in enumerate(diseases):
        vals = [reports[l].get("per_disease_auc", {}).get(d, np.nan)
                for l in labels]
        ax.bar(x + j * width, vals, width, label=d)
    macro = [reports[l].get(metric, np.nan) for l in labels]
    ax.bar(x + len(diseases) * width, macro, width, label=metric,
           color="black", alpha=0.6)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(labels, rotation=15, fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("score")
    ax.set_title(title or metric)
    ax.legend(fontsize=8)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_attention_slices(grid: np.ndarray, path, volume=None,
                          title: str = "[CLS] attention"):
    """One panel per depth slice of the patch-grid attention map; when the
    source volume is given its mid-slices are shown alongside for context."""
    d = grid.shape[0]
    rows = 2 if volume is not None else 1
    fig, axes = plt.subplots(rows, d, figsize=(3 * d, 3 * rows), squeeze=False)
    vmax = float(grid.max()) or 1.0
    for z in range(d):
        ax = axes[0][z]
        im = ax.imshow(grid[z], cmap="magma", vmin=0.0, vmax=vmax)
        ax.set_title(f"grid slice {z}", fontsize=9)
        ax.axis("off")
    fig.colorbar(im, ax=axes[0], shrink=0.8)
    if volume is not None:
        step = volume.shape[0] // d
        for z in range(d):
            ax = axes[1][z]
            ax.imshow(volume[z * step + step // 2], cmap="gray")
            ax.set_title(f"volume slice {z * step + step // 2}", fontsize=9)
            ax.axis("off")
    fig.suptitle(title)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def plot_bound_history(history: Sequence[float], true_mi: float, log_n: float,
                       path, title: str = "InfoNCE bound"):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(1, len(history) + 1), history, marker="o",
            label="bound estimate")
    ax.axhline(true_mi, color="green", linestyle="--", label="true MI")
    ax.axhline(log_n, color="red", linestyle=":", label="log N ceiling")
    ax.set_xlabel("eval checkpoint")
    ax.set_ylabel("nats")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
