"""Figures written to files: prediction overlays and training curves."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Polygon as PolygonPatch  # noqa: E402

PRED_COLOR = "#e8590c"
GT_COLOR = "#2b8a3e"


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def draw_overlay(
    image: np.ndarray,
    predictions: Sequence[dict],
    path,
    ground_truth: Sequence | None = None,
    title: str | None = None,
) -> Path:
    """Image with predicted polygons, scores and transcripts; optional ground truth dashed."""
    h, w = image.shape[:2]
    scale = max(w, h) / 4.0 / 100.0
    fig, ax = plt.subplots(figsize=(max(w / 100.0, 3.0), max(h / 100.0, 3.0)))
    ax.imshow(np.clip(image, 0, 1), interpolation="nearest")
    size = np.array([w, h])
    for inst in ground_truth or []:
        pts = np.asarray(inst.polygon if hasattr(inst, "polygon") else inst["polygon"]).reshape(-1, 2) * size
        ax.add_patch(PolygonPatch(pts, closed=True, fill=False, ec=GT_COLOR, lw=1.0, ls="--"))
    for pred in predictions:
        pts = np.asarray(pred["polygon"]).reshape(-1, 2) * size
        ax.add_patch(PolygonPatch(pts, closed=True, fill=False, ec=PRED_COLOR, lw=1.5))
        x, y = pts[:, 0].min(), pts[:, 1].min()
        ax.text(
            x,
            y - 1,
            f"{pred['transcript']} {pred['score']:.2f}",
            color="white",
            fontsize=max(6, 8 * scale),
            va="bottom",
            bbox={"facecolor": PRED_COLOR, "alpha": 0.8, "pad": 1, "lw": 0},
        )
    ax.set_xlim(0, w)
    ax.set_ylim(h, 0)
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout(pad=0.2)
    return _save(fig, path)


def plot_loss_curve(history: Sequence[dict], path, components: Sequence[str] | None = None) -> Path:
    """Total loss (and chosen components) per iteration on a log scale."""
    components = components or ("classification", "box_l1", "box_giou", "polygon", "recognition")
    it = np.array([row["iteration"] for row in history])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(it, [row["total"] for row in history], color="k", lw=1.2, label="total")
    for name in components:
        vals = [row.get(name) for row in history]
        if any(v is None for v in vals):
            continue
        ax.plot(it, vals, lw=0.8, label=name)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    return _save(fig, path)
