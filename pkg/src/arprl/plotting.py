"""Figures written next to the CSV outputs (headless Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

MARKERS = {0: "o", 1: "^"}


def plot_projection(coords: np.ndarray, y: np.ndarray, u: np.ndarray, path, title: str = "") -> Path:
    """Scatter of a 2-d projection; colour is the task label, marker the attribute."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 5))
    for uv in np.unique(u):
        m = u == uv
        ax.scatter(coords[m, 0], coords[m, 1], c=y[m], cmap="coolwarm", vmin=y.min(), vmax=max(y.max(), 1),
                   s=4, alpha=0.5, marker=MARKERS.get(int(uv), "s"), label=f"u={int(uv)}")
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    ax.legend(loc="best", markerscale=3)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_tradeoff(rows: list[dict], path) -> Path:
    """Mean accuracies against alpha, one line per metric, error bars over seeds."""
    path = Path(path)
    alphas = sorted({r["alpha"] for r in rows})
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, label in (("test_acc", "test"), ("robust_acc", "robust"), ("infer_acc", "inference")):
        means, stds = [], []
        for a in alphas:
            vals = [r[key] for r in rows if r["alpha"] == a]
            means.append(np.mean(vals))
            stds.append(np.std(vals))
        ax.errorbar(alphas, means, yerr=stds, marker="o", capsize=3, label=label)
    ax.set_xlabel("alpha")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_training_log(log: list[dict], path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    ep = [r["epoch"] for r in log]
    for k in ("L1", "L2", "L3", "objective"):
        ax.plot(ep, [r[k] for r in log], label=k)
    ax.set_xlabel("epoch")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
