"""Figures written next to the CSV/JSON outputs: loss curves, metric distributions,
prediction grids and the epoch-ablation trend."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
    # Keep output bytes stable between runs.
    "svg.hashsalt": "frameforecast",
}
MODEL_COLOR = "#1f5fa8"
BASELINE_COLOR = "#b0413e"


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curves(log, path: Path) -> Path:
    """Per-step training components on the left, per-epoch validation loss on the right."""
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
        steps = [r["step"] for r in log.steps]
        for key, label in (("loss_total", "total"), ("loss_diff", "diffusion"),
                           ("loss_perc", "perceptual"), ("loss_adv", "adversarial")):
            ax1.plot(steps, [r[key] for r in log.steps], lw=0.8, label=label)
        ax1.set_yscale("log")
        ax1.set_xlabel("step")
        ax1.set_ylabel("training loss")
        ax1.legend(frameon=False)
        if log.val:
            ax2.plot([r["epoch"] for r in log.val], [r["loss_total"] for r in log.val], "o-",
                     color=MODEL_COLOR, ms=3, label="total")
            ax2.plot([r["epoch"] for r in log.val], [r["loss_diff"] for r in log.val], "s--",
                     color="0.4", ms=3, label="diffusion")
            ax2.legend(frameon=False)
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("validation loss")
        return _save(fig, path)


def plot_metric_distributions(results, baseline, path: Path) -> Path:
    """SSIM and PSNR histograms for the model against the identity baseline."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3))
        for ax, key, unit in ((axes[0], "ssim", ""), (axes[1], "psnr", " (dB)")):
            for rs, color, label in ((results, MODEL_COLOR, "model"),
                                     (baseline or [], BASELINE_COLOR, "identity baseline")):
                vals = [getattr(r, key) for r in rs if r.ok and not math.isinf(getattr(r, key))]
                if vals:
                    ax.hist(vals, bins=20, alpha=0.6, color=color, label=label)
            ax.set_xlabel(key.upper() + unit)
            ax.set_ylabel("count")
        axes[0].legend(frameon=False)
        return _save(fig, path)


def _imshow(ax, img, title=None):
    ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
    ax.set_xticks([])
    ax.set_yticks([])
    for s in ax.spines.values():
        s.set_visible(False)
    if title:
        ax.set_title(title)


def plot_image_grid(rows: Sequence[Sequence[np.ndarray]], row_labels: Sequence[str],
                    col_titles: Sequence[str], path: Path) -> Path:
    n_rows, n_cols = len(rows), len(rows[0])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n_rows, n_cols, figsize=(1.9 * n_cols, 1.9 * n_rows),
                                 squeeze=False)
        for r in range(n_rows):
            for c in range(n_cols):
                _imshow(axes[r][c], rows[r][c], col_titles[c] if r == 0 else None)
            axes[r][0].set_ylabel(row_labels[r])
        return _save(fig, path)


def plot_rollout_grid(items, path: Path) -> Path:
    """Three rows (inputs, ground truths, predictions) by one column per rollout step."""
    rows = [[it.input_image for it in items], [it.truth for it in items],
            [it.prediction for it in items]]
    titles = [f"{it.input_frame} -> {it.metrics.target_frame}" for it in items]
    return plot_image_grid(rows, ["input", "ground truth", "predicted"], titles, path)


def plot_examples(examples: dict, path: Path) -> Path:
    rows = [examples["inputs"], examples["truths"], examples["predictions"]]
    return plot_image_grid(rows, ["input", "ground truth", "predicted"], examples["ids"], path)


def plot_epoch_ablation(rows: Sequence[dict], path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(6, 2.6))
        epochs = [r["epochs"] for r in rows]
        ax1.plot(epochs, [r["ssim_mean"] for r in rows], "o-", color=MODEL_COLOR)
        ax1.set_xlabel("epochs")
        ax1.set_ylabel("mean SSIM")
        ax2.plot(epochs, [r["psnr_mean"] for r in rows], "o-", color=MODEL_COLOR)
        ax2.set_xlabel("epochs")
        ax2.set_ylabel("mean PSNR (dB)")
        return _save(fig, path)
