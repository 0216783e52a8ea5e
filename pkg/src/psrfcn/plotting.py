"""Figures written next to the text reports (PNG via the Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EvalResult  # noqa: E402
from .synth import BASE_COLORS, CLASS_NAMES  # noqa: E402

_RC = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _class_color(c: int):
    return BASE_COLORS.get(c, (0.3, 0.3, 0.3))


def plot_training(history, path) -> Path:
    """Loss and validation mAP per epoch, side by side."""
    epochs = np.array([r.epoch for r in history])
    loss = np.array([r.loss for r in history])
    val = np.array([r.val_map for r in history])
    with plt.rc_context(_RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
        ax1.plot(epochs, loss, marker="o", ms=3, color="0.2")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("training loss")
        ax2.plot(epochs, val, marker="o", ms=3, color="tab:green")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("validation mAP")
        ax2.set_ylim(0, 1.02)
        return _save(fig, path)


def plot_pr_curves(result: EvalResult, path, title: str | None = None) -> Path:
    """Precision-recall curve per class with its AP in the legend."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 4))
        for c, curve in result.curves.items():
            name = CLASS_NAMES.get(c, str(c))
            ap = "undefined" if curve.ap is None else f"{curve.ap:.4f}"
            if curve.recall.size:
                r = np.concatenate([[0.0], curve.recall])
                p = np.concatenate([[curve.precision[0]], curve.precision])
                ax.step(r, p, where="post", color=_class_color(c), label=f"{c} {name} AP {ap}")
            else:
                ax.plot([], [], color=_class_color(c), label=f"{c} {name} AP {ap}")
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_title(title or f"mAP {result.mean_ap:.4f}")
        ax.legend(loc="lower left", fontsize=8)
        return _save(fig, path)


def plot_ablation(rows: Sequence[tuple[str, float]], path, title: str | None = None) -> Path:
    labels = [label for label, _ in rows]
    values = np.array([v for _, v in rows])
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(rows) + 1.5), 3.4))
        bars = ax.bar(np.arange(len(rows)), values, color="tab:blue", width=0.6)
        for bar, v in zip(bars, values):
            ax.annotate(f"{v:.4f}", (bar.get_x() + bar.get_width() / 2, v), ha="center", va="bottom", fontsize=8)
        ax.set_xticks(np.arange(len(rows)), labels, rotation=20, ha="right", fontsize=8)
        ax.set_ylabel("validation mAP")
        ax.set_ylim(0, 1.08)
        if title:
            ax.set_title(title)
        return _save(fig, path)
