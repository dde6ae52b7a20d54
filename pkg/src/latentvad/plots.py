"""Figures written next to the CSV outputs (PNG, headless backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.patches as mpatches  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

METRIC_COLORS = {
    "latent_mse": "#C0392B",
    "latent_cosine": "#8E44AD",
    "pixel_prediction_mse": "#27AE60",
    "pixel_reconstruction_mse": "#2980B9",
}
RAIN_STYLES = {"none": "-", "heavy": "--", "torrential": ":"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_scores(series, labels: Optional[np.ndarray], path, title: str = "") -> Path:
    """Normalised score against frame index, anomalous frames shaded."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 2.4))
        ax.plot(series.frame_indices, series.normalized_scores, color=METRIC_COLORS.get(series.metric, "k"),
                lw=1.0, label=series.metric)
        if labels is not None:
            lab = np.asarray(labels)[series.positions]
            ax.fill_between(series.frame_indices, 0, 1, where=lab > 0, color="0.85", step="mid",
                            label="anomalous")
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("frame")
        ax.set_ylabel("score")
        ax.set_title(title or series.video_id)
        ax.legend(loc="upper right", frameon=False)
        return _save(fig, path)


def plot_sweep(rows: Sequence[Dict], path) -> Path:
    """AUC against relative brightness, one curve per (rain level, metric)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        groups: Dict[tuple, List] = {}
        for r in rows:
            if np.isfinite(r["auc"]):
                groups.setdefault((r["rain"], r["metric"]), []).append((r["brightness"], r["auc"]))
        for (rain, metric), pts in sorted(groups.items()):
            pts.sort()
            x, y = zip(*pts)
            ax.plot(x, y, RAIN_STYLES.get(rain, "-"), marker="o", ms=3, color=METRIC_COLORS.get(metric, "k"),
                    label=f"{metric} / rain {rain}")
        ax.set_xlabel("relative brightness")
        ax.set_ylabel("frame-level AUC")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_lowfps(rows: Sequence[Dict], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        by_metric: Dict[str, List] = {}
        for r in rows:
            if np.isfinite(r["auc"]):
                by_metric.setdefault(r["metric"], []).append((r["d"], r["auc"], r["ci95"]))
        for metric, pts in sorted(by_metric.items()):
            pts.sort()
            d, auc, ci = map(np.asarray, zip(*pts))
            ax.errorbar(d, auc, yerr=ci, marker="o", ms=3, capsize=2, color=METRIC_COLORS.get(metric, "k"),
                        label=metric)
        ax.set_xlabel("frame gap d")
        ax.set_ylabel("frame-level AUC")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_frame_grid(grids: Sequence[Dict[str, np.ndarray]], row_labels: Sequence[str], path) -> Path:
    """Rows of input / reconstruction / prediction / error images."""
    cols = ("input", "reconstruction", "prediction", "error")
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(grids), len(cols), figsize=(1.6 * len(cols), 1.6 * len(grids)),
                                 squeeze=False)
        for i, (grid, label) in enumerate(zip(grids, row_labels)):
            for j, c in enumerate(cols):
                ax = axes[i, j]
                ax.imshow(np.clip(grid[c], 0, 1))
                ax.set_xticks([])
                ax.set_yticks([])
                if i == 0:
                    ax.set_title(c)
                if j == 0:
                    ax.set_ylabel(label)
        return _save(fig, path)


def plot_regions(frame: np.ndarray, regions, path, title: str = "") -> Path:
    """Frame with red boxes around high prediction-error regions."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 3.2 * frame.shape[0] / frame.shape[1]))
        ax.imshow(np.clip(frame, 0, 1))
        for r in regions:
            ax.add_patch(mpatches.Rectangle((r.x - 0.5, r.y - 0.5), r.w, r.h, fill=False, ec="red", lw=1.2))
        ax.set_axis_off()
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_loss(reports, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        ep = [r.epoch for r in reports]
        ax.semilogy(ep, [r.recon_term for r in reports], label="reconstruction")
        ax.semilogy(ep, [r.prediction_term for r in reports], label="latent prediction")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss term")
        ax.legend(frameon=False)
        return _save(fig, path)
