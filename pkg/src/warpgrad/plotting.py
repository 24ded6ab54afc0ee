"""Matplotlib figures for run reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PANEL_TITLES = ("source", "target", "output", "flow", "mask")


def plot_metrics(history: dict, path, log_scale: bool = True) -> Path:
    """One small axis per metric name, step on x."""
    path = Path(path)
    names = sorted(history)
    if not names:
        return path
    cols = min(3, len(names))
    rows = int(np.ceil(len(names) / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 2.8 * rows), squeeze=False)
    for ax, name in zip(axes.flat, names):
        steps, vals = zip(*history[name])
        vals = np.asarray(vals)
        ax.plot(steps, vals, lw=1.2)
        if log_scale and np.all(vals > 0) and vals.max() / vals.min() > 20:
            ax.set_yscale("log")
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("step", fontsize=8)
        ax.tick_params(labelsize=7)
        ax.grid(alpha=0.3)
    for ax in list(axes.flat)[len(names):]:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_panels(panels, path, titles=PANEL_TITLES) -> Path:
    """Side-by-side figure of uint8 RGB panels."""
    path = Path(path)
    fig, axes = plt.subplots(1, len(panels), figsize=(2.2 * len(panels), 2.4))
    for ax, img, title in zip(np.atleast_1d(axes), panels, titles):
        ax.imshow(img, interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
