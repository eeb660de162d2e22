"""Matplotlib rendering: prediction overlays and report figures (PNG)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.patches as mpatches  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .codec import CLASS_NAMES  # noqa: E402
from .evalkit import Detection  # noqa: E402
from .model import GridSpec  # noqa: E402

_CLASS_COLORS = ["tab:red", "tab:green", "tab:blue", "tab:orange", "tab:purple"]


def _draw_detections(ax, dets: list[Detection]) -> None:
    for det in dets:
        color = _CLASS_COLORS[det.class_id % len(_CLASS_COLORS)]
        if det.mask is not None:
            overlay = np.zeros((*det.mask.shape, 4))
            overlay[det.mask] = matplotlib.colors.to_rgba(color, alpha=0.45)
            ax.imshow(overlay)
        x1, y1, x2, y2 = det.box
        ax.add_patch(mpatches.Rectangle((x1, y1), x2 - x1, y2 - y1,
                                        fill=False, edgecolor=color, lw=1.2))
        ax.text(x1, max(y1 - 1, 0), f"{CLASS_NAMES[det.class_id]} "
                f"{det.score:.2f}", color=color, fontsize=6, va="bottom")


def render_overlay(image: np.ndarray, dets: list[Detection], path,
                   grid: GridSpec | None = None,
                   grid_positive: list[bool] | None = None,
                   title: str = "") -> Path:
    """Write a PNG with boxes, mask alpha blends, and grid decode status."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(4, 4), dpi=160)
    ax.imshow(np.clip(image, 0, 1))
    _draw_detections(ax, dets)
    if grid is not None:
        centers = grid.centers()
        status = grid_positive if grid_positive is not None \
            else [False] * grid.m
        colors = ["lime" if s else "gray" for s in status]
        ax.scatter(centers[:, 0], centers[:, 1], s=12, c=colors,
                   marker="+", linewidths=0.8)
    if title:
        ax.set_title(title, fontsize=8)
    ax.set_axis_off()
    fig.tight_layout(pad=0.1)
    fig.savefig(path)
    plt.close(fig)
    return path


def render_dense_map(field: np.ndarray, path, title: str = "",
                     cmap: str = "viridis") -> Path:
    """Depth maps ((H, W)) or normal maps ((H, W, 3) mapped to RGB)."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(4, 4), dpi=160)
    if field.ndim == 3:
        ax.imshow(np.clip((field + 1.0) / 2.0, 0, 1))
    else:
        im = ax.imshow(field, cmap=cmap)
        fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        ax.set_title(title, fontsize=8)
    ax.set_axis_off()
    fig.tight_layout(pad=0.1)
    fig.savefig(path)
    plt.close(fig)
    return path


def render_loss_curves(csv_path, out_path) -> Path:
    """Per-component loss curves from the training CSV."""
    out_path = Path(out_path)
    rows = np.genfromtxt(csv_path, delimiter=",", names=True)
    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=160)
    for name in ("ce", "focal", "dice", "reg"):
        if name in (rows.dtype.names or ()):
            ax.plot(np.atleast_1d(rows["iter"]), np.atleast_1d(rows[name]),
                    label=name, lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def render_metric_bars(metrics: dict, out_path, title: str = "") -> Path:
    """Bar chart of scalar metrics written next to the JSON report."""
    out_path = Path(out_path)
    keys = [k for k, v in metrics.items() if isinstance(v, (int, float))
            and np.isfinite(v)]
    vals = [metrics[k] for k in keys]
    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=160)
    ax.bar(range(len(keys)), vals, color="tab:blue")
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels(keys, rotation=30, ha="right", fontsize=7)
    for i, v in enumerate(vals):
        ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=6)
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
