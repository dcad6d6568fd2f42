"""Static figures for reports: training curves, metric distributions, mask overlays."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

PRED_RGB = (255, 0, 0)
GT_RGB = (0, 255, 0)
OVERLAP_RGB = (255, 255, 0)


def new_figure(ncols=1, nrows=1, width=3.4, aspect=0.75):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(nrows, ncols, figsize=(width * ncols, width * aspect * nrows), squeeze=False)
    return fig, ax


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)
    return path


def overlay_rgb(frame, pred, gt) -> np.ndarray:
    """8-bit RGB: prediction red, ground truth green, overlap yellow, elsewhere the gray frame."""
    frame = np.clip(np.asarray(frame, dtype=np.float64), 0, 1)
    gray = np.round(frame * 255).astype(np.uint8)
    out = np.repeat(gray[..., None], 3, axis=-1)
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool) if gt is not None else np.zeros_like(p)
    out[p & ~g] = PRED_RGB
    out[g & ~p] = GT_RGB
    out[p & g] = OVERLAP_RGB
    return out


def save_png(rgb, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.imsave(path, np.asarray(rgb, dtype=np.uint8))
    return path


def training_curves(rows, path):
    stages = sorted({r["stage"] for r in rows})
    fig, ax = new_figure(2)
    epochs = [r["epoch"] for r in rows]
    ax[0, 0].plot(epochs, [r["train_loss"] for r in rows], marker="o", ms=3)
    ax[0, 0].set_xlabel("epoch")
    ax[0, 0].set_ylabel("training loss")
    ax[0, 0].set_yscale("log")
    val_keys = sorted({k for r in rows for k, v in r.get("val", {}).items() if v is not None and np.isfinite(v)})
    for key in val_keys:
        ax[0, 1].plot(epochs, [r["val"].get(key) for r in rows], marker="o", ms=3, label=key)
    ax[0, 1].set_xlabel("epoch")
    ax[0, 1].set_ylabel("validation")
    if val_keys:
        ax[0, 1].legend(frameon=False)
    fig.suptitle(", ".join(stages))
    return save(fig, path)


def metric_by_quality(report, key, path, ylabel=None):
    groups = {}
    for c in report.clips:
        v = c.get(key)
        if v is not None and np.isfinite(v):
            groups.setdefault(c["quality"], []).append(v)
    fig, ax = new_figure()
    names = sorted(groups)
    if names:
        ax[0, 0].boxplot([groups[n] for n in names], tick_labels=names, widths=0.5)
    ax[0, 0].set_ylabel(ylabel or key)
    ax[0, 0].set_title(report.method)
    return save(fig, path)


def dice_over_time(reports, path):
    fig, ax = new_figure()
    for rep in reports:
        per = [c["dice_per_frame"] for c in rep.clips if "dice_per_frame" in c]
        if not per:
            continue
        T = min(len(p) for p in per)
        arr = np.array([p[:T] for p in per]) * 100
        ax[0, 0].plot(np.arange(T), arr.mean(0), marker="o", ms=3, label=rep.method)
    ax[0, 0].set_xlabel("frame t")
    ax[0, 0].set_ylabel("Dice (0-100)")
    ax[0, 0].legend(frameon=False)
    return save(fig, path)


def ablation_bars(results, path):
    fig, ax = new_figure(width=4.5)
    labels = ["".join("1" if v else "0" for v in r["toggles"].values()) for r in results]
    ax[0, 0].bar(np.arange(len(results)), [r["mDice"] for r in results], color="0.6")
    ax[0, 0].set_xticks(np.arange(len(results)))
    ax[0, 0].set_xticklabels(labels, rotation=30)
    ax[0, 0].set_ylabel("mDice")
    ax[0, 0].set_xlabel("toggles (points, CA, MLP, SA, TSA)")
    return save(fig, path)
