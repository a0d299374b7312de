"""Matplotlib figures written next to the CSV reports (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_training_curves(curves: dict[str, list[dict]], path, title: str = "") -> Path:
    """Loss and mean Dice per epoch; ``curves`` maps a run label to parsed curve rows.

    Train rows are drawn dashed, test rows solid.
    """
    fig, (ax_loss, ax_dice) = plt.subplots(1, 2, figsize=(10, 4))
    for i, (label, rows) in enumerate(curves.items()):
        colour = f"C{i % 10}"
        for split, style in (("train", "--"), ("test", "-")):
            sel = [r for r in rows if r["split"] == split]
            if not sel:
                continue
            ep = [r["epoch"] for r in sel]
            ax_loss.plot(ep, [r["loss"] for r in sel], style, color=colour, label=f"{label} {split}")
            ax_dice.plot(ep, [r["mean_dice"] for r in sel], style, color=colour, label=f"{label} {split}")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("cross-entropy")
    ax_dice.set_xlabel("epoch")
    ax_dice.set_ylabel("mean foreground Dice")
    ax_dice.set_ylim(0, 1)
    ax_dice.legend(fontsize=7)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_ablation_bars(labels: Sequence[str], dice: Sequence[float], params: Sequence[int], path) -> Path:
    fig, ax = plt.subplots(figsize=(8, 4))
    x = np.arange(len(labels))
    bars = ax.bar(x, dice, color="C0")
    for bar, p in zip(bars, params):
        ax.annotate(
            f"{p:,}",
            (bar.get_x() + bar.get_width() / 2, bar.get_height()),
            ha="center",
            va="bottom",
            fontsize=7,
        )
    ax.set_xticks(x, labels, rotation=20)
    ax.set_ylabel("test mean foreground Dice")
    ax.set_ylim(0, 1.05)
    return _save(fig, path)


def plot_feature_grid(maps: np.ndarray, path, row_labels: Sequence[str] = ()) -> Path:
    """Grid of 2-D maps shaped (rows, cols, H, W), each min-max scaled on its own."""
    maps = np.asarray(maps)
    rows, cols = maps.shape[:2]
    fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols, 1.6 * rows), squeeze=False)
    for r in range(rows):
        for c in range(cols):
            ax = axes[r][c]
            ax.imshow(maps[r, c], cmap="gray")
            ax.set_xticks([])
            ax.set_yticks([])
            if c == 0 and r < len(row_labels):
                ax.set_ylabel(row_labels[r], fontsize=8)
    return _save(fig, path)
