"""Report figures written next to the CSV/JSON outputs of the CLI."""

from __future__ import annotations

import os
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)) or ".", exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_map(image: np.ndarray, pixel_map: np.ndarray, path: str, title: str = "") -> str:
    """Image and attribution heatmap side by side."""
    fig, axes = plt.subplots(1, 2, figsize=(6, 3))
    img = image[..., 0] if image.shape[-1] == 1 else image
    axes[0].imshow(img, cmap="gray", vmin=0, vmax=1)
    axes[0].set_title("input")
    axes[1].imshow(img, cmap="gray", vmin=0, vmax=1)
    axes[1].imshow(pixel_map, cmap="jet", alpha=0.5)
    axes[1].set_title(title or "attribution")
    for ax in axes:
        ax.set_axis_off()
    return _save(fig, path)


def plot_mean_curves(curves: Dict[str, Sequence], path: str) -> str:
    """Mean insertion/deletion curves; ``curves`` maps a label to a list of EvalCurve."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, items in curves.items():
        if not items:
            continue
        fr = items[0].fractions
        ax.plot(fr, np.mean([c.scores for c in items], axis=0), label=label)
    ax.set_xlabel("fraction of pixels")
    ax.set_ylabel("target probability")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_confidence_bins(report, path: str, metric: str = "d_insdel") -> str:
    """Bar chart of a metric's mean per confidence bin, annotated with counts."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    centers = (report.edges[:-1] + report.edges[1:]) / 2
    width = report.edges[1] - report.edges[0]
    vals = [v if v is not None else 0.0 for v in report.means.get(metric, [None] * len(centers))]
    ax.bar(centers, vals, width=width * 0.9)
    for x, v, n in zip(centers, vals, report.counts):
        ax.annotate(f"n={n}", (x, v), ha="center", va="bottom", fontsize=7)
    ax.set_xlabel("model confidence")
    ax.set_ylabel(metric)
    return _save(fig, path)


def plot_ssim_matrix(matrix: np.ndarray, layers: Sequence[int], path: str) -> str:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(matrix, vmin=0, vmax=1, cmap="viridis")
    ax.set_xticks(range(len(layers)), [str(l) for l in layers])
    ax.set_yticks(range(len(layers)), [str(l) for l in layers])
    ax.set_xlabel("layer")
    ax.set_ylabel("layer")
    for i in range(len(layers)):
        for j in range(len(layers)):
            ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center", fontsize=7, color="w")
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def plot_layer_histogram(counts: Sequence[int], layers: Sequence[int], path: str) -> str:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.bar([str(l) for l in layers], counts)
    ax.set_xlabel("layer with best insertion minus deletion")
    ax.set_ylabel("samples")
    return _save(fig, path)


def plot_sweep(values: Sequence, series: Dict[str, Sequence[float]], path: str,
               xlabel: str, logx: bool = False) -> str:
    """One line per series over a swept setting (beta, layer range, ...)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = np.arange(len(values))
    for name, ys in series.items():
        ax.plot(xs, [np.nan if y is None else y for y in ys], marker="o", label=name)
    ax.set_xticks(xs, [str(v) for v in values], rotation=30 if len(values) > 6 else 0)
    ax.set_xlabel(xlabel + (" (log spaced)" if logx else ""))
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_sanity(table: Dict[Optional[int], float], path: str) -> str:
    """Mean SSIM to the original maps per randomization start index."""
    keys = list(table)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(range(len(keys)), [table[k] for k in keys], marker="o")
    ax.set_xticks(range(len(keys)), ["none" if k is None else str(k) for k in keys])
    ax.set_xlabel("randomized from block")
    ax.set_ylabel("mean SSIM")
    ax.set_ylim(-0.1, 1.05)
    return _save(fig, path)
