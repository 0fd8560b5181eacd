"""Matplotlib figures written next to the JSON/CSV reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# keeps PNG bytes stable across runs
_SAVE_KW = {"dpi": 100, "metadata": {"Software": None}}


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def plot_confusion_matrix(counts, class_order: Sequence[str], path: str | Path, title: str = "") -> Path:
    counts = np.asarray(counts)
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(len(class_order)), class_order, rotation=30, ha="right")
    ax.set_yticks(range(len(class_order)), class_order)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    thresh = counts.max() / 2 if counts.size else 0
    for (i, j), v in np.ndenumerate(counts):
        ax.text(j, i, int(v), ha="center", va="center", color="white" if v > thresh else "black")
    fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        ax.set_title(title)
    return _finish(fig, path)


def plot_history(history: Sequence[dict], path: str | Path, metric_name: str = "metric") -> Path:
    """Loss, monitored metric and learning rate per epoch."""
    epochs = [h["epoch"] for h in history]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    axes[0].plot(epochs, [h["train_loss"] for h in history], label="train")
    axes[0].plot(epochs, [h["val_loss"] for h in history], label="val")
    axes[0].set_title("loss")
    axes[0].legend()
    axes[1].plot(epochs, [h["train_metric"] for h in history], label="train")
    axes[1].plot(epochs, [h["val_metric"] for h in history], label="val")
    axes[1].set_title(metric_name)
    axes[1].legend()
    axes[2].semilogy(epochs, [h["lr"] for h in history])
    axes[2].set_title("learning rate")
    for ax in axes:
        ax.set_xlabel("epoch")
    return _finish(fig, path)


def plot_seg_scores(dice: Sequence[float], iou: Sequence[float], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bins = np.linspace(0, 1, 21)
    ax.hist([list(dice), list(iou)], bins=bins, label=["Dice", "IoU"])
    ax.set_xlabel("score")
    ax.set_ylabel("cases")
    ax.legend()
    return _finish(fig, path)
