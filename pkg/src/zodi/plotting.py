"""Static figures: loss curves, transfer contact sheets and report bars.

Everything goes through the Agg backend and is saved without the
``Software`` metadata chunk so that the PNG bytes depend only on the data.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def _rgb(image: np.ndarray) -> np.ndarray:
    return np.clip((image.transpose(1, 2, 0) + 1.0) / 2.0, 0.0, 1.0)


def plot_loss_curve(losses, path, title: str = "denoiser pretraining", ylabel: str = "loss") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    epochs = np.arange(1, len(losses) + 1)
    ax.plot(epochs, losses, marker="o", ms=2.5, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def contact_sheet(pairs, path, n: int = 8, title: str | None = None) -> Path:
    """Originals on the top row, their transfers beneath."""
    pairs = list(pairs)[:n]
    cols = max(len(pairs), 1)
    fig, axes = plt.subplots(2, cols, figsize=(1.6 * cols, 1.9), squeeze=False)
    for j in range(cols):
        for i in range(2):
            axes[i, j].axis("off")
        if j < len(pairs):
            axes[0, j].imshow(_rgb(pairs[j].source.image), interpolation="nearest")
            axes[1, j].imshow(_rgb(pairs[j].generated), interpolation="nearest")
    axes[0, 0].set_title("source", fontsize=7, loc="left")
    axes[1, 0].set_title("transferred", fontsize=7, loc="left")
    if title:
        fig.suptitle(title, fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_report(domains, methods, means, stds, path) -> Path:
    """Grouped bars of mIoU; ``means[m][d]`` with error bars from ``stds``."""
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(domains), 3.2))
    x = np.arange(len(domains))
    w = 0.8 / max(len(methods), 1)
    for i, m in enumerate(methods):
        ax.bar(x + (i - (len(methods) - 1) / 2) * w, [means[m][d] for d in domains], w,
               yerr=[stds[m][d] for d in domains], capsize=2, label=m)
    ax.set_xticks(x)
    ax.set_xticklabels(domains)
    ax.set_ylabel("mIoU")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7, frameon=False)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)
