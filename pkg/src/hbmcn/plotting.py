"""PNG renderings of the report curves (off-screen Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

# a fixed timestamp-free metadata block keeps repeated renders byte-identical
_META = {"Software": None}


def _save(fig: Figure, path) -> Path:
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=100, metadata=_META)
    return Path(path)


def plot_cmc(cmc: Sequence[float], path, max_rank: int = 50, title: str = "CMC") -> Path:
    cmc = np.asarray(cmc, dtype=np.float64)[:max_rank]
    ranks = np.arange(1, len(cmc) + 1)
    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot()
    ax.plot(ranks, cmc, marker="o", markersize=3)
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate")
    ax.set_ylim(0, 1.02)
    ax.set_xlim(1, max(len(cmc), 2))
    ax.grid(alpha=0.3)
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_loss(trace, path, title: str = "training loss") -> Path:
    """``trace`` is a sequence of (epoch, lr, mean loss) rows."""
    epochs = [row[0] for row in trace]
    losses = [row[2] for row in trace]
    lrs = [row[1] for row in trace]
    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot()
    ax.plot(epochs, losses, color="tab:blue")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean joint loss", color="tab:blue")
    ax2 = ax.twinx()
    ax2.step(epochs, lrs, where="post", color="tab:gray", linestyle="--")
    ax2.set_yscale("log")
    ax2.set_ylabel("learning rate", color="tab:gray")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
