"""Map panels (prediction / ground truth / absolute error) and training curves."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_panels(pred, gt, path, title: str | None = None) -> Path:
    pred, gt = np.asarray(pred), np.asarray(gt)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    for ax, img, name, cmap in (
        (axes[0], pred, "prediction", "viridis"),
        (axes[1], gt, "ground truth", "viridis"),
        (axes[2], np.abs(pred - gt), "absolute error", "Reds"),
    ):
        im = ax.imshow(img, cmap=cmap, vmin=0.0, vmax=1.0 if cmap == "viridis" else None)
        ax.set_title(name)
        ax.axis("off")
        fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_curves(logs: dict[str, list[dict]], path, metric: str = "val_rmse") -> Path:
    """One line per labelled training log, ``metric`` against epoch."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, rows in logs.items():
        ax.plot([r["epoch"] for r in rows], [r[metric] for r in rows], marker="o", ms=3, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel(metric)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
