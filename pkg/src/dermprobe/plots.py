"""Raster figure rendering for run reports.

Every function writes a PNG next to the delimited tables the CLI emits.
Rendering is headless (Agg) and avoids wall-clock metadata so reruns
produce stable files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import numpy as np
from matplotlib import pyplot as plt

from . import data as dat

_DPI = 120
_SAVE_KW = {"dpi": _DPI, "bbox_inches": "tight", "metadata": {"Software": "dermprobe"}}

_CLUSTER_COLORS = np.array(
    [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40],
     [148, 103, 189], [140, 86, 75], [227, 119, 194], [127, 127, 127]],
    dtype=np.uint8,
)


def save_ablation_heatmap(grid, path) -> None:
    """Accuracy heatmap over (block, timestep) cells; missing cells hatched out."""
    values = np.array(
        [[np.nan if v is None else v for v in row] for row in grid.values], dtype=np.float64
    )
    fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * len(grid.timesteps)), 0.6 * len(grid.block_indices) + 1.6))
    im = ax.imshow(values, vmin=0.0, vmax=1.0, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(grid.timesteps)), [str(t) for t in grid.timesteps], rotation=90, fontsize=7)
    ax.set_yticks(range(len(grid.block_indices)), [f"block {b}" for b in grid.block_indices], fontsize=8)
    ax.set_xlabel("timestep")
    ax.set_title(f"classification accuracy, {grid.subset_percent}% subset")
    fig.colorbar(im, ax=ax, fraction=0.03)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_roc_curve(scores, labels, path, title: str = "ROC") -> None:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    thresholds = np.concatenate([[np.inf], np.sort(np.unique(scores))[::-1]])
    tpr = [np.mean(scores[labels] >= t) if labels.any() else 0.0 for t in thresholds]
    fpr = [np.mean(scores[~labels] >= t) if (~labels).any() else 0.0 for t in thresholds]
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    ax.plot(fpr, tpr, marker=".", lw=1.2)
    ax.plot([0, 1], [0, 1], ls="--", c="gray", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_iou_bars(report, path) -> None:
    """Grouped per-class IoU bars: one group per stratum (all + tone bins)."""
    strata = [("all", report.overall)] + [(t, report.per_tone[t]) for t in dat.TONE_BINS]
    strata = [(name, s) for name, s in strata if s is not None]
    width = 0.8 / len(strata)
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    xs = np.arange(dat.CLASS_COUNT)
    for i, (name, s) in enumerate(strata):
        heights = [s.iou_per_class[c] if s.iou_per_class[c] is not None else 0.0 for c in xs]
        ax.bar(xs + i * width, heights, width=width, label=f"{name} (n={s.n})")
    ax.set_xticks(xs + 0.4 - width / 2, dat.CLASS_NAMES)
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.legend(fontsize=7)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_loss_curves(history_rows, path) -> None:
    members = sorted({r["member"] for r in history_rows}, key=str)
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    for m in members:
        rows = [r for r in history_rows if r["member"] == m]
        label = "train" if m == "" else f"member {m} train"
        ax.plot([r["epoch"] for r in rows], [r["train_loss"] for r in rows], lw=0.9, label=label)
        ax.plot(
            [r["epoch"] for r in rows],
            [r["val_loss"] for r in rows],
            lw=0.9, ls="--",
            label="val" if m == "" else f"member {m} val",
        )
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=6)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_cluster_map(labels: np.ndarray, path) -> None:
    from PIL import Image

    rgb = _CLUSTER_COLORS[np.asarray(labels) % len(_CLUSTER_COLORS)]
    Image.fromarray(rgb, mode="RGB").save(path)
