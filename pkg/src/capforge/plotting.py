"""Figures written next to the tab-separated reports.

Everything goes through an explicit Agg canvas so no pyplot global state is
touched, and PNG metadata is stripped so reruns produce identical bytes.
"""

from __future__ import annotations

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

_PNG_META = {"Software": None}


def _save(fig: Figure, path) -> None:
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=100, metadata=_PNG_META)


def plot_attention(words, alphas, path, title: str | None = None) -> None:
    """Heatmap of attention weights: one row per generated word, one column per annotation row."""
    alphas = np.atleast_2d(np.asarray(alphas, dtype=float))
    n_words, n_rows = alphas.shape
    fig = Figure(figsize=(1.2 + 0.6 * n_rows, 1.0 + 0.35 * n_words), layout="constrained")
    ax = fig.add_subplot()
    im = ax.imshow(alphas, cmap="viridis", vmin=0.0, vmax=1.0, aspect="auto")
    ax.set_yticks(range(n_words), labels=list(words))
    labels = [f"obj{i}" for i in range(n_rows - 1)] + ["image"]
    ax.set_xticks(range(n_rows), labels=labels, rotation=45)
    ax.set_xlabel("annotation row")
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, label="attention weight")
    _save(fig, path)


def plot_loss_history(history, path, window: int = 50) -> None:
    """Per-iteration batch loss with a trailing moving average."""
    its = np.array([it for it, _ in history], dtype=float)
    vals = np.array([v for _, v in history], dtype=float)
    fig = Figure(figsize=(6, 3.5), layout="constrained")
    ax = fig.add_subplot()
    ax.plot(its, vals, lw=0.6, color="0.6", label="batch loss")
    if len(vals) >= window:
        smooth = np.convolve(vals, np.ones(window) / window, mode="valid")
        ax.plot(its[window - 1:], smooth, lw=1.5, color="C0", label=f"{window}-iter mean")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    if len(vals) and np.all(vals > 0):
        ax.set_yscale("log")
    ax.legend(frameon=False)
    _save(fig, path)


def plot_scores(scores: dict[str, float], path) -> None:
    """Bar chart of metric values (CIDEr on its own axis, it is reported x100)."""
    names = [n for n in scores if n != "CIDEr"]
    fig = Figure(figsize=(6, 3), layout="constrained")
    ax = fig.add_subplot()
    bars = ax.bar(names, [scores[n] for n in names], color="C0")
    ax.bar_label(bars, fmt="%.3f", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    if "CIDEr" in scores:
        ax.set_title(f"CIDEr = {scores['CIDEr']:.2f}", fontsize=9)
    _save(fig, path)
