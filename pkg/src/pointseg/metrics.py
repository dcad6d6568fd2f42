"""Evaluation kernels: Dice, HD95, TAP-style tracking metrics, paired t-test, temporal stability."""
from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage, special

DEFAULT_THRESHOLDS = (1.0, 2.0, 4.0, 8.0, 16.0)


def dice_score(pred, gt) -> float:
    """2|A n B| / (|A| + |B|) on binary masks; two empty masks score 1."""
    a = np.asarray(pred).astype(bool)
    b = np.asarray(gt).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def boundary(mask) -> np.ndarray:
    """Foreground pixels 4-adjacent to background or to the image border."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(2, 1))
    return (padded & ~interior)[1:-1, 1:-1]


def _directed_surface_distances(a_edge, b_edge):
    # distance from every pixel to the nearest boundary pixel of b
    dist = ndimage.distance_transform_edt(~b_edge)
    return dist[a_edge]


def hd95(pred, gt, spacing: float = 1.0) -> float:
    """95th-percentile symmetric boundary distance, in units of ``spacing``.

    Returns NaN when either mask is empty; callers report it as missing.
    """
    a = np.asarray(pred).astype(bool)
    b = np.asarray(gt).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        return float("nan")
    ea, eb = boundary(a), boundary(b)
    d_ab = _directed_surface_distances(ea, eb)
    d_ba = _directed_surface_distances(eb, ea)
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)) * spacing)


def tap_metrics(pred_tracks, pred_visible, gt_tracks, gt_visible, thresholds=DEFAULT_THRESHOLDS) -> dict:
    """Average Jaccard, <delta_avg and occlusion accuracy for one clip.

    Tracks are (..., T, 2); visibilities (..., T) booleans.  A prediction
    counts as a true positive at threshold d when both it and the ground truth
    are visible and its error is <= d.
    """
    pred_tracks = np.asarray(pred_tracks, dtype=np.float64)
    gt_tracks = np.asarray(gt_tracks, dtype=np.float64)
    pv = np.asarray(pred_visible).astype(bool)
    gv = np.asarray(gt_visible).astype(bool)
    if pred_tracks.shape != gt_tracks.shape or pv.shape != gv.shape or pv.shape != gt_tracks.shape[:-1]:
        raise ValueError("track/visibility shapes disagree")
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("at least one threshold required")
    err = np.linalg.norm(pred_tracks - gt_tracks, axis=-1)
    oa = float((pv == gv).mean())
    jaccards, within_fracs = [], []
    n_vis = gv.sum()
    for thr in thresholds:
        within = err <= thr
        tp = (within & gv & pv).sum()
        fn = (gv & ~(pv & within)).sum()
        fp = (pv & ~(gv & within)).sum()
        denom = tp + fp + fn
        jaccards.append(tp / denom if denom else 1.0)
        within_fracs.append((within & gv).sum() / n_vis if n_vis else 1.0)
    return {
        "AJ": float(np.mean(jaccards)),
        "delta_avg": float(np.mean(within_fracs)),
        "OA": oa,
        "jaccard_by_threshold": [float(j) for j in jaccards],
        "within_by_threshold": [float(w) for w in within_fracs],
    }


class TTestResult(NamedTuple):
    statistic: float
    pvalue: float
    dof: int
    degenerate: bool


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test.

    When every difference is identical the statistic is undefined; the result
    is flagged degenerate with p = 1 for a zero mean difference, else 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("paired t-test needs two equal-length sequences of at least 2 values")
    diff = a - b
    n = diff.size
    dof = n - 1
    mean = diff.mean()
    sd = diff.std(ddof=1)
    if sd == 0 or not np.isfinite(sd):
        if mean == 0:
            return TTestResult(0.0, 1.0, dof, True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, dof, True)
    t = mean / (sd / math.sqrt(n))
    # two-sided tail of Student's t through the regularized incomplete beta function
    p = special.betainc(dof / 2.0, 0.5, dof / (dof + t * t))
    return TTestResult(float(t), float(min(max(p, 0.0), 1.0)), dof, False)


def temporal_stability(masks) -> float:
    """Mean of 1 - Dice between consecutive binary masks (lower is steadier)."""
    masks = np.asarray(masks)
    if masks.shape[0] < 2:
        raise ValueError("temporal stability needs at least two frames")
    return float(np.mean([1.0 - dice_score(masks[t], masks[t + 1]) for t in range(masks.shape[0] - 1)]))


def clip_segmentation_metrics(pred_masks, gt_masks, spacing: float, annotated=None) -> dict:
    """Per-clip mDice (0-100), HD95 (physical units, NaN frames skipped) and stability.

    pred_masks, gt_masks: (T, H, W) binary.
    """
    pred_masks = np.asarray(pred_masks).astype(bool)
    gt_masks = np.asarray(gt_masks).astype(bool)
    T = gt_masks.shape[0]
    frames = range(T) if annotated is None else [t for t in range(T) if annotated[t]]
    dices = [dice_score(pred_masks[t], gt_masks[t]) for t in frames]
    hds = [hd95(pred_masks[t], gt_masks[t], spacing) for t in frames]
    valid = [h for h in hds if np.isfinite(h)]
    return {
        "mDice": 100.0 * float(np.mean(dices)),
        "HD95": float(np.mean(valid)) if valid else float("nan"),
        "HD95_missing": len(hds) - len(valid),
        "dice_per_frame": [float(d) for d in dices],
        "stability": temporal_stability(pred_masks) if T >= 2 else 0.0,
    }
