"""Matplotlib figures for the report subcommands.

Figures are built on the object-oriented API with the Agg canvas, so nothing
touches pyplot's global state, and PNGs are written without a Software tag so
repeated runs produce identical bytes.
"""

from __future__ import annotations

import io
import math

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from netlens.fsutil import atomic_write_bytes

GOLDEN = (math.sqrt(5) - 1.0) / 2.0


def new_figure(width: float = 8, height: float | None = None, ncols: int = 1, nrows: int = 1):
    """Figure plus axes with publication-style font sizes."""
    height = height or width * GOLDEN
    fig = Figure(figsize=(width, height), facecolor="w")
    FigureCanvasAgg(fig)
    axes = fig.subplots(nrows, ncols, squeeze=False)
    for ax in axes.ravel():
        ax.tick_params(labelsize=width * 1.4)
    return fig, axes


def save_figure(fig: Figure, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, bbox_inches="tight", metadata={"Software": None})
    atomic_write_bytes(path, buf.getvalue())


def plot_condition_numbers(layers: list[str], kappas: list[float | None]):
    fig, axes = new_figure()
    ax = axes[0, 0]
    idx = [i for i, k in enumerate(kappas) if k is not None]
    ax.plot(idx, [kappas[i] for i in idx], marker="o")
    ax.set_xticks(range(len(layers)))
    ax.set_xticklabels(layers, rotation=60, ha="right", fontsize=9)
    ax.set_ylabel("condition number", fontsize=12)
    ax.set_xlabel("layer", fontsize=12)
    return fig


def plot_eigen_density(edges: np.ndarray, masses: np.ndarray, title: str = ""):
    fig, axes = new_figure()
    ax = axes[0, 0]
    centers = 0.5 * (edges[:-1] + edges[1:])
    ax.bar(centers, masses, width=np.diff(edges), align="center", edgecolor="none")
    ax.set_xlabel("eigenvalue (mirrored)", fontsize=12)
    ax.set_ylabel("density", fontsize=12)
    if title:
        ax.set_title(title, fontsize=12)
    return fig


def plot_robustness_grid(grid):
    kinds = list(dict.fromkeys(k for k, _ in grid.cells))
    sevs = sorted({s for _, s in grid.cells})
    vals = np.full((len(kinds), len(sevs)), np.nan)
    for (k, s), (mean, _) in grid.cells.items():
        vals[kinds.index(k), sevs.index(s)] = mean
    lim = float(np.nanmax(np.abs(vals))) if np.isfinite(vals).any() else 1.0
    lim = lim or 1.0
    fig, axes = new_figure(width=6, height=0.45 * len(kinds) + 1.5)
    ax = axes[0, 0]
    im = ax.imshow(vals, cmap="RdBu", vmin=-lim, vmax=lim, aspect="auto")
    ax.set_yticks(range(len(kinds)))
    ax.set_yticklabels(kinds, fontsize=9)
    ax.set_xticks(range(len(sevs)))
    ax.set_xticklabels([str(s) for s in sevs], fontsize=9)
    ax.set_xlabel("severity", fontsize=11)
    ax.set_title(f"p({grid.label_a}) - p({grid.label_b})", fontsize=11)
    fig.colorbar(im, ax=ax)
    return fig


def plot_score_table(table, metric: str = "RMA"):
    rows = [r for r in table.rows if r.metric == metric and r.mean is not None]
    lesions = list(dict.fromkeys(r.lesion for r in rows))
    groups = list(dict.fromkeys((r.method, r.pooling) for r in rows))
    fig, axes = new_figure()
    ax = axes[0, 0]
    width = 0.8 / max(len(groups), 1)
    for gi, (method, pooling) in enumerate(groups):
        ys = [next((r.mean for r in rows if r.lesion == l and (r.method, r.pooling) == (method, pooling)), 0.0)
              for l in lesions]
        ax.bar(np.arange(len(lesions)) + gi * width, ys, width, label=f"{method} / {pooling}")
    ax.set_xticks(np.arange(len(lesions)) + 0.4 - width / 2)
    ax.set_xticklabels(lesions, fontsize=10)
    ax.set_ylabel(f"mean {metric}", fontsize=12)
    ax.legend(fontsize=8)
    return fig


def plot_heatmaps(images: list[np.ndarray], heatmaps: list[np.ndarray], titles: list[str]):
    n = len(images)
    fig, axes = new_figure(width=2.2 * n, height=4.4, ncols=n, nrows=2)
    for i in range(n):
        img = np.clip(np.moveaxis(images[i], 0, -1), 0, 1)
        if img.shape[-1] == 1:
            img = img[..., 0]
        axes[0, i].imshow(img, cmap="gray" if img.ndim == 2 else None)
        axes[0, i].set_title(titles[i], fontsize=9)
        axes[1, i].imshow(heatmaps[i], cmap="hot")
        for ax in axes[:, i]:
            ax.set_axis_off()
    return fig
