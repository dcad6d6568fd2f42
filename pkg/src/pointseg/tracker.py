"""Point decoder: iterative refinement of point trajectories and visibility.

A simplified stand-in for a full tracking-any-point transformer with the same
output contract: per-layer trajectories, final visibility logits and the
final point-query states used downstream as point tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import (CrossAttentionBlock, Encoder, EncoderConfig, FeedForward, PatchTokens, pixel_to_unit,
                      sample_map, sine_encoding, temporal_encoding)
from .errors import ConfigError, InputError, NumericError


@dataclass
class TrackerConfig:
    layers: int = 3
    visibility_threshold: float = 0.5
    grid_size: int = 8
    manual_points: tuple = ()
    corr_radius: int = 3
    corr_dim: int = 32
    heads: int = 4

    def validate(self):
        if self.layers < 1:
            raise ConfigError(f"refinement layers N_pd >= 1 violated ({self.layers})")
        if self.grid_size < 1:
            raise ConfigError(f"grid size G >= 1 violated ({self.grid_size})")
        if not 0 < self.visibility_threshold < 1:
            raise ConfigError("visibility threshold must lie in (0, 1)")
        if self.corr_radius < 0:
            raise ConfigError("corr_radius must be >= 0")


@dataclass
class TrackerOutput:
    trajectories: list  # N_pd tensors (B, N, T, 2), pixel coordinates
    visibility_logits: torch.Tensor  # (B, N, T)
    point_tokens: torch.Tensor  # (B, N, T, d)
    initial: Optional[torch.Tensor] = None  # (B, N, T, 2)

    @property
    def positions(self) -> torch.Tensor:
        return self.trajectories[-1]

    @property
    def visibility(self) -> torch.Tensor:
        return torch.sigmoid(self.visibility_logits)

    def detached(self) -> "TrackerOutput":
        return TrackerOutput([t.detach() for t in self.trajectories], self.visibility_logits.detach(),
                             self.point_tokens.detach(),
                             None if self.initial is None else self.initial.detach())


def seed_points(cfg: TrackerConfig, height: int, width: int) -> np.ndarray:
    """G x G grid with half-cell margins (x fastest), then any manual points."""
    if cfg.grid_size < 1:
        raise ConfigError(f"grid size G >= 1 violated ({cfg.grid_size})")
    G = cfg.grid_size
    xs = (np.arange(G) + 0.5) * width / G
    ys = (np.arange(G) + 0.5) * height / G
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], -1)
    if cfg.manual_points:
        manual = np.asarray(cfg.manual_points, dtype=np.float64).reshape(-1, 2)
        bad = (manual[:, 0] < 0) | (manual[:, 0] > width - 1) | (manual[:, 1] < 0) | (manual[:, 1] > height - 1)
        if bad.any():
            raise InputError(f"manual points outside the {width}x{height} frame: {manual[bad].tolist()}")
        pts = np.concatenate([pts, manual], 0)
    return pts


class RefinementLayer(nn.Module):
    def __init__(self, dim: int, heads: int, n_corr: int, ffn_dim: int):
        super().__init__()
        self.local = nn.Linear(n_corr + dim + 2, dim)
        self.cross = CrossAttentionBlock(dim, heads)
        self.temporal = CrossAttentionBlock(dim, heads, self_attention=True)
        self.ffn = FeedForward(dim, ffn_dim)
        self.delta_norm = nn.LayerNorm(dim)
        self.delta = nn.Linear(dim, 2)
        nn.init.normal_(self.delta.weight, std=1e-3)
        nn.init.zeros_(self.delta.bias)


class PointDecoder(nn.Module):
    def __init__(self, cfg: TrackerConfig, dim: int, fine_channels: int, ffn_dim: int = 256):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dim = dim
        r = cfg.corr_radius
        offs = torch.arange(-r, r + 1, dtype=torch.float32)
        oy, ox = torch.meshgrid(offs, offs, indexing="ij")
        self.register_buffer("corr_offsets", torch.stack([ox, oy], -1).reshape(-1, 2), persistent=False)
        n_corr = (2 * r + 1) ** 2
        self.fine_proj = nn.Conv2d(fine_channels, cfg.corr_dim, 1)
        self.init_proj = nn.Linear(cfg.corr_dim + dim, dim)
        self.layers = nn.ModuleList(RefinementLayer(dim, cfg.heads, n_corr, ffn_dim) for _ in range(cfg.layers))
        self.vis_norm = nn.LayerNorm(dim)
        self.vis_head = nn.Linear(dim, 1)

    def forward(self, tokens: PatchTokens, init_points: torch.Tensor) -> TrackerOutput:
        """init_points: (B, N, 2) pixel positions at frame 0 (the query frame)."""
        B, T, Np, d = tokens.tokens.shape
        H, W = tokens.image_size
        N = init_points.shape[1]
        if init_points.shape[0] != B:
            raise ValueError("batch size of points and tokens differ")
        dtype = tokens.tokens.dtype
        fine = tokens.skips[1]  # (B, T, C, H, W)
        fine = self.fine_proj(fine.reshape(B * T, *fine.shape[2:]))
        C = fine.shape[1]
        coarse = tokens.grid(0).reshape(B * T, d, *tokens.shapes[0])

        init_unit = pixel_to_unit(init_points, H, W)
        template = sample_map(fine.view(B, T, C, H, W)[:, 0], init_unit)  # (B, N, C)
        first = sample_map(coarse.view(B, T, d, *tokens.shapes[0])[:, 0], init_unit)
        state = self.init_proj(torch.cat([template, first], -1))  # (B, N, d)
        state = state[:, :, None, :] + temporal_encoding(T, d, dtype)[None, None]
        state = state.expand(B, N, T, d).contiguous()

        points = init_points[:, :, None, :].expand(B, N, T, 2).contiguous()
        initial = points
        moving = torch.ones(T, dtype=dtype)
        moving[0] = 0.0  # the query frame stays anchored
        moving = moving.view(1, 1, T, 1)
        t_pos = temporal_encoding(T, d, dtype)
        patch_kv = tokens.tokens.reshape(B * T, Np, d)
        patch_pos = tokens.pos.to(dtype)
        offsets = self.corr_offsets.to(dtype)
        trajectories = []
        for layer in self.layers:
            cur = points.detach()
            unit = pixel_to_unit(cur, H, W)  # (B, N, T, 2)
            # local correlation window around the current estimate
            win = cur[:, :, :, None, :] + offsets  # (B, N, T, K, 2)
            K = win.shape[3]
            win_unit = pixel_to_unit(win, H, W).permute(0, 2, 1, 3, 4).reshape(B * T, N * K, 2)
            samp = sample_map(fine, win_unit).view(B, T, N, K, C)
            corr = (samp * template[:, None, :, None, :]).sum(-1) / math.sqrt(C)  # (B, T, N, K)
            corr = corr.permute(0, 2, 1, 3)
            here = sample_map(coarse, unit.permute(0, 2, 1, 3).reshape(B * T, N, 2)).view(B, T, N, d)
            disp = (cur - initial) / max(self.cfg.corr_radius, 1)
            state = state + layer.local(torch.cat([corr, here.permute(0, 2, 1, 3), disp], -1))

            q = state.permute(0, 2, 1, 3).reshape(B * T, N, d)
            q_pos = sine_encoding(unit.permute(0, 2, 1, 3).reshape(B * T, N, 2), d)
            q = layer.cross(q, patch_kv, q_pos, patch_pos)
            state = q.view(B, T, N, d).permute(0, 2, 1, 3)
            s = state.reshape(B * N, T, d)
            s = layer.temporal(s, x_pos=t_pos)
            state = layer.ffn(s).view(B, N, T, d)

            delta = layer.delta(layer.delta_norm(state)) * moving
            points = cur + delta
            trajectories.append(points)
        vis_logits = self.vis_head(self.vis_norm(state)).squeeze(-1)
        return TrackerOutput(trajectories, vis_logits, state, initial)


class TrackerModel(nn.Module):
    """Encoder + point decoder; owns its own encoder so it can be frozen as a unit."""

    def __init__(self, encoder_cfg: Optional[EncoderConfig] = None, cfg: Optional[TrackerConfig] = None):
        super().__init__()
        self.encoder_cfg = encoder_cfg or EncoderConfig()
        self.cfg = cfg or TrackerConfig()
        self.encoder = Encoder(self.encoder_cfg)
        self.decoder = PointDecoder(self.cfg, self.encoder_cfg.dim, self.encoder.fine_channels,
                                    self.encoder_cfg.ffn_dim)

    @property
    def token_dim(self) -> int:
        return self.encoder_cfg.dim

    def forward(self, frames: torch.Tensor, init_points: torch.Tensor) -> TrackerOutput:
        return self.decoder(self.encoder(frames), init_points)


def track(tokens: PatchTokens, initial_points, decoder: PointDecoder) -> TrackerOutput:
    pts = torch.as_tensor(initial_points, dtype=tokens.tokens.dtype)
    if pts.dim() == 2:
        pts = pts.unsqueeze(0)
    return decoder(tokens, pts)


# -- stage-1 objective -----------------------------------------------------------

@dataclass
class TrackingLossWeights:
    visibility: float = 1.0
    layers: tuple = (1.0, 1.0, 1.0)
    include_occluded: bool = False


def _check_finite(name, x):
    if torch.isnan(x).any():
        raise NumericError(f"NaN in {name}")


def tracking_loss(output: TrackerOutput, gt_positions: torch.Tensor, gt_visibility: torch.Tensor,
                  weights: Optional[TrackingLossWeights] = None):
    """Visibility cross-entropy on the last layer plus layer-weighted L1 on positions.

    The L1 term is a mean over coordinates of (point, frame) pairs that are
    visible in the ground truth (all pairs with ``include_occluded``).  With a
    leading batch dimension the loss is the mean of per-sample losses.
    Returns ``(total, components)``.
    """
    weights = weights or TrackingLossWeights()
    n_layers = len(output.trajectories)
    layer_w = list(weights.layers)
    if len(layer_w) != n_layers:
        if len(set(layer_w)) == 1 and layer_w:
            layer_w = [layer_w[0]] * n_layers
        else:
            raise ConfigError(f"{len(layer_w)} layer weights for {n_layers} refinement layers")
    gt_positions = torch.as_tensor(gt_positions)
    gt_visibility = torch.as_tensor(gt_visibility)
    for name, x in [("gt positions", gt_positions), ("visibility logits", output.visibility_logits)] + \
            [(f"trajectory layer {i + 1}", t) for i, t in enumerate(output.trajectories)]:
        _check_finite(name, x)
    squeeze = gt_positions.dim() == 3
    if squeeze:
        gt_positions = gt_positions.unsqueeze(0)
        gt_visibility = gt_visibility.unsqueeze(0)
    vis_t = gt_visibility.to(output.visibility_logits.dtype)
    logits = output.visibility_logits
    if logits.dim() == 2:
        logits = logits.unsqueeze(0)
    ce = F.binary_cross_entropy_with_logits(logits, vis_t.expand_as(logits), reduction="none")
    ce = ce.flatten(1).mean(1)
    if weights.include_occluded:
        sel = torch.ones_like(vis_t)
    else:
        sel = vis_t
    denom = (sel.flatten(1).sum(1) * 2).clamp_min(1.0)
    per_layer = []
    for traj in output.trajectories:
        if traj.dim() == 3:
            traj = traj.unsqueeze(0)
        err = (traj - gt_positions).abs().sum(-1) * sel
        per_layer.append(err.flatten(1).sum(1) / denom)
    pos_terms = torch.stack(per_layer, 0)  # (n_layers, B)
    lw = pos_terms.new_tensor(layer_w)[:, None]
    total = weights.visibility * ce + (lw * pos_terms).sum(0)
    components = {"visibility_ce": ce.mean(), "position_l1": pos_terms.mean(1)}
    return total.mean(), components
