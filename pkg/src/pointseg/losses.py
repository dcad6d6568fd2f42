"""Segmentation objectives: layer-weighted Dice and trajectory-anchored temporal smoothing."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .errors import ConfigError, NumericError


@dataclass
class LossWeights:
    mask_layers: tuple = (0.25, 0.5, 1.0)
    dice: float = 1.0
    temporal: float = 100.0
    # "mask": per-layer temporal weight = temporal * mask_layers[n]; "uniform": temporal for every layer
    temporal_layering: str = "mask"
    dice_smooth: float = 1.0
    gate_visibility: bool = True
    pair_limit: Optional[int] = None  # subsample frame pairs when T(T-1)/2 exceeds this
    # stage-1 terms
    visibility: float = 1.0
    track_layers: tuple = (1.0, 1.0, 1.0)
    include_occluded: bool = False

    def validate(self, n_layers: Optional[int] = None):
        vals = list(self.mask_layers) + list(self.track_layers) + [self.dice, self.temporal, self.visibility]
        if any(v < 0 for v in vals):
            raise ConfigError("loss weights must be >= 0")
        if n_layers is not None and len(self.mask_layers) != n_layers:
            raise ConfigError(f"{len(self.mask_layers)} mask-layer weights for {n_layers} fusion layers")
        if self.temporal_layering not in ("mask", "uniform"):
            raise ConfigError("temporal_layering must be 'mask' or 'uniform'")

    def temporal_layers(self):
        if self.temporal_layering == "uniform":
            return [self.temporal] * len(self.mask_layers)
        return [self.temporal * w for w in self.mask_layers]


def bilinear_sample(field: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Sample ``field`` (..., H, W) at pixel-index ``points`` (..., M, 2) -> (..., M).

    Integer coordinates hit pixel centers exactly; coordinates outside
    [0, W-1] x [0, H-1] are clamped to the border.  Differentiable in both
    the field values and the point coordinates.
    """
    field = torch.as_tensor(field)
    points = torch.as_tensor(points, dtype=field.dtype)
    if torch.isnan(points).any():
        raise NumericError("NaN sampling coordinates")
    H, W = field.shape[-2:]
    lead = field.shape[:-2]
    if points.shape[:-2] != lead:
        points = points.expand(*lead, *points.shape[-2:])
    x = points[..., 0].clamp(0, W - 1)
    y = points[..., 1].clamp(0, H - 1)
    x0 = torch.floor(x).clamp(max=max(W - 2, 0))
    y0 = torch.floor(y).clamp(max=max(H - 2, 0))
    wx = x - x0
    wy = y - y0
    x0i = x0.long()
    y0i = y0.long()
    x1i = (x0i + 1).clamp(max=W - 1)
    y1i = (y0i + 1).clamp(max=H - 1)
    flat = field.reshape(*lead, H * W)

    def gather(yi, xi):
        return torch.gather(flat, -1, yi * W + xi)

    v00, v01 = gather(y0i, x0i), gather(y0i, x1i)
    v10, v11 = gather(y1i, x0i), gather(y1i, x1i)
    top = v00 * (1 - wx) + v01 * wx
    bottom = v10 * (1 - wx) + v11 * wx
    return top * (1 - wy) + bottom * wy


def dice_loss(pred: torch.Tensor, gt: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Soft Dice loss reduced over the last two axes."""
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    inter = (pred * gt).sum((-1, -2))
    total = pred.sum((-1, -2)) + gt.sum((-1, -2))
    return 1 - (2 * inter + smooth) / (total + smooth)


def mask_loss(probs: torch.Tensor, gt: torch.Tensor, weights: LossWeights, annotated: Optional[torch.Tensor] = None):
    """Layer-weighted Dice.

    probs: (B, L, T, K, H, W) per-layer probabilities; gt: (B, T, K, H, W) or
    (B, T, H, W); annotated: optional (B, T) bool, Dice only on those frames.
    Returns ``(total, per_layer)`` where per_layer is (L,) of unweighted means.
    """
    L = probs.shape[1]
    if len(weights.mask_layers) != L:
        raise ConfigError(f"{len(weights.mask_layers)} mask-layer weights for {L} fusion layers")
    gt = torch.as_tensor(gt, dtype=probs.dtype)
    if gt.dim() == probs.dim() - 2:
        gt = gt.unsqueeze(2)
    d = dice_loss(probs, gt.unsqueeze(1), weights.dice_smooth)  # (B, L, T, K)
    d = d.mean(-1)
    if annotated is None:
        per_sample = d.mean(-1)  # (B, L)
    else:
        a = torch.as_tensor(annotated, dtype=probs.dtype)[:, None, :]
        per_sample = (d * a).sum(-1) / a.sum(-1).clamp_min(1.0)
    lw = probs.new_tensor(weights.mask_layers)
    total = weights.dice * (per_sample * lw).sum(-1)
    return total.mean(), per_sample.mean(0)


def frame_pairs(T: int, limit: Optional[int] = None, generator: Optional[torch.Generator] = None):
    """All (t1 < t2) index pairs, or a uniform subset of ``limit`` of them."""
    t1, t2 = torch.triu_indices(T, T, offset=1)
    if limit is not None and t1.numel() > limit:
        keep = torch.randperm(t1.numel(), generator=generator)[:limit].sort().values
        t1, t2 = t1[keep], t2[keep]
    return t1, t2


def temporal_loss(probs: torch.Tensor, tracks: torch.Tensor, visibility: Optional[torch.Tensor],
                  weights: LossWeights, generator: Optional[torch.Generator] = None):
    """Squared disagreement of mask values sampled along trajectories, over frame pairs.

    probs: (B, L, T, K, H, W); tracks: (B, N, T, 2) pixel positions, treated
    as constants; visibility: (B, N, T) in {0, 1} or None.  Each layer's term
    is a mean over included (pair, point) entries and classes.
    Returns ``(total, per_layer)``.
    """
    B, L, T, K, H, W = probs.shape
    lw = weights.temporal_layers()
    if len(lw) != L:
        raise ConfigError(f"{len(lw)} temporal weights for {L} fusion layers")
    if T < 2:
        zero = probs.sum() * 0
        return zero, probs.new_zeros(L)
    tracks = torch.as_tensor(tracks, dtype=probs.dtype).detach()
    N = tracks.shape[1]
    pts = tracks.permute(0, 2, 1, 3)  # (B, T, N, 2)
    pts = pts[:, None, :, None].expand(B, L, T, K, N, 2)
    vals = bilinear_sample(probs, pts)  # (B, L, T, K, N)
    t1, t2 = frame_pairs(T, weights.pair_limit, generator)
    diff = (vals[:, :, t1] - vals[:, :, t2]) ** 2  # (B, L, P, K, N)
    if visibility is not None and weights.gate_visibility:
        v = torch.as_tensor(visibility, dtype=probs.dtype).permute(0, 2, 1)  # (B, T, N)
        gate = (v[:, t1] * v[:, t2])[:, None, :, None, :]  # (B, 1, P, 1, N)
    else:
        gate = probs.new_ones(B, 1, t1.numel(), 1, N)
    num = (diff * gate).sum((2, 3, 4))  # (B, L)
    den = (gate.sum((2, 3, 4)) * K).clamp_min(1.0)
    per_sample = num / den
    total = (per_sample * probs.new_tensor(lw)).sum(-1)
    return total.mean(), per_sample.mean(0)
