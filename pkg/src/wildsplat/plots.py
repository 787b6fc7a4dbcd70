"""Figures written by the ``eval`` and ``maskviz`` commands."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def label_colors(labels: np.ndarray) -> np.ndarray:
    """uint8 RGB image with one colour per segment id."""
    cmap = plt.get_cmap("tab20")
    rgb = np.array([cmap(i % 20)[:3] for i in range(int(labels.max()) + 1)])
    return np.round(rgb[labels] * 255).astype(np.uint8)


def _off(ax):
    ax.set_xticks([])
    ax.set_yticks([])


def render_grid(renders: dict[int, np.ndarray], clean: np.ndarray, path) -> Path:
    """Held-out renders above the matching clean images."""
    views = sorted(renders)
    fig, axes = plt.subplots(2, len(views), figsize=(2.2 * len(views), 4.6), squeeze=False)
    for j, v in enumerate(views):
        axes[0, j].imshow(np.clip(renders[v], 0, 1))
        axes[0, j].set_title(f"render {v}", fontsize=9)
        axes[1, j].imshow(clean[v])
        axes[1, j].set_title(f"clean {v}", fontsize=9)
        _off(axes[0, j])
        _off(axes[1, j])
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def view_psnr_bars(view_psnr: dict[int, float], path) -> Path:
    views = sorted(view_psnr)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar([str(v) for v in views], [view_psnr[v] for v in views], color="tab:blue")
    ax.set_xlabel("held-out view")
    ax.set_ylabel("PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def training_curves(metrics_csv, path) -> Path | None:
    """Loss and held-out PSNR against step; None when the log is empty."""
    with open(metrics_csv, newline="") as f:
        rows = list(csv.DictReader(f))
    rows = [r for r in rows if r["eval_psnr"]]
    if not rows:
        return None
    step = [int(r["step"]) for r in rows]
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
    a.plot(step, [float(r["loss"]) for r in rows])
    a.set_xlabel("step")
    a.set_ylabel("loss")
    a.set_yscale("log")
    b.plot(step, [float(r["eval_psnr"]) for r in rows])
    b.set_xlabel("step")
    b.set_ylabel("held-out PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def mask_panel(image, pairs: dict, gt_masks, path, max_views: int = 6) -> Path:
    """Per view: input, network mask, superpixels, binarised mask, refined mask, ground truth."""
    views = sorted(pairs)[:max_views]
    cols = ["input", "m_o", "superpixels", "binarised", "refined", "ground truth"]
    fig, axes = plt.subplots(len(views), len(cols), figsize=(2.0 * len(cols), 2.0 * len(views)), squeeze=False)
    for i, v in enumerate(views):
        p = pairs[v]
        panels = [image[v], p.m_o, label_colors(p.labels), p.m_o_star, p.m_s, gt_masks[v] if gt_masks is not None else np.zeros_like(p.m_s)]
        for j, (name, arr) in enumerate(zip(cols, panels)):
            ax = axes[i, j]
            if arr.ndim == 3:
                ax.imshow(arr)
            else:
                ax.imshow(arr, cmap="gray", vmin=0, vmax=1)
            if i == 0:
                ax.set_title(name, fontsize=9)
            _off(ax)
        axes[i, 0].set_ylabel(f"view {v}", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
