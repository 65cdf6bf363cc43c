"""Report figures written to image files (headless backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_cost_comparison(comparison, path):
    """Thumbnail-side costs relative to the reference network, one bar per metric."""
    rows = comparison.rows()
    labels = [r[0].replace("_", " ") for r in rows]
    rel = [r[2] / r[1] if r[1] else 0.0 for r in rows]
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    x = np.arange(len(rows))
    ax.bar(x - 0.2, np.ones(len(rows)), 0.4, label=comparison.reference.name, color="#8c8c8c")
    bars = ax.bar(x + 0.2, rel, 0.4, label=comparison.thumb.name, color="#3a7dc9")
    for bar, (_, _, _, ratio) in zip(bars, rows):
        ax.annotate(f"{ratio:.2f}x", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.set_xticks(x, labels, fontsize=8)
    ax.set_ylabel("relative to reference")
    ax.set_ylim(0, 1.15)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_training_curves(rows, path):
    """Training objective per step and validation top-1 error per epoch."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    stages = sorted({r["stage"] for r in rows})
    for stage in stages:
        train = [r for r in rows if r["stage"] == stage and r["event"] == "train" and r["total"] != ""]
        val = [r for r in rows if r["stage"] == stage and r["event"] == "val"]
        if train:
            ax1.plot([int(r["step"]) for r in train], [float(r["total"]) for r in train], label=f"stage {stage}")
        top1 = [(int(r["step"]), float(r["val_top1"])) for r in val if r["val_top1"] != ""]
        if top1:
            ax2.plot(*zip(*top1), marker="o", label=f"stage {stage}")
    ax1.set_xlabel("step")
    ax1.set_ylabel("objective")
    ax2.set_xlabel("step")
    ax2.set_ylabel("val top-1 error")
    for ax in (ax1, ax2):
        if ax.lines:
            ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_thumbnail_grid(originals, thumbs, path, max_images=8):
    """Originals on the top row, thumbnails beneath; inputs are uint8 N x 3 x H x W."""
    n = min(len(originals), len(thumbs), max_images)
    fig, axes = plt.subplots(2, n, figsize=(1.4 * n, 3), squeeze=False)
    for i in range(n):
        for row, img in enumerate((originals[i], thumbs[i])):
            ax = axes[row][i]
            ax.imshow(np.asarray(img).transpose(1, 2, 0), interpolation="nearest")
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
