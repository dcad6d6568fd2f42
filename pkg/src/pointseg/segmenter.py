"""Fusion layers and mask decoder.

Point tokens (from the tracker) and K learnable mask tokens exchange
information with the per-frame patch tokens through four attention pathways
and an MLP; every fusion layer's patch/mask tokens are decoded into masks
for deep supervision.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import (CrossAttentionBlock, Encoder, EncoderConfig, FeedForward, PatchTokens, _groups,
                      _init_linear, pixel_to_unit, sine_encoding, temporal_encoding)
from .errors import ConfigError

# ablation toggle rows: (points, point-to-patch CA, MLP, point SA, point TSA); the last is the full model
ABLATION_ROWS = (
    (False, True, True, True, True),
    (True, True, False, False, False),
    (True, True, True, False, False),
    (True, True, True, True, False),
    (True, True, True, True, True),
)
ABLATION_COLUMNS = ("Points", "Point-to-Patch CA", "MLP", "Point SA", "Point TSA")


@dataclass
class FusionConfig:
    layers: int = 3
    classes: int = 1
    use_points: bool = True
    use_point_ca: bool = True
    use_mlp: bool = True
    use_point_sa: bool = True
    use_point_tsa: bool = True
    heads: int = 4
    decoder_dim: int = 16
    ffn_dim: int = 256

    def validate(self):
        if self.layers < 1:
            raise ConfigError(f"fusion layers N_FL >= 1 violated ({self.layers})")
        if self.classes < 1:
            raise ConfigError(f"mask classes K >= 1 violated ({self.classes})")
        if self.decoder_dim < 1:
            raise ConfigError("decoder_dim must be >= 1")

    def toggles(self) -> tuple:
        return (self.use_points, self.use_point_ca, self.use_mlp, self.use_point_sa, self.use_point_tsa)

    @classmethod
    def from_row(cls, row, **kw) -> "FusionConfig":
        p, ca, mlp, sa, tsa = row
        return cls(use_points=p, use_point_ca=ca, use_mlp=mlp, use_point_sa=sa, use_point_tsa=tsa, **kw)


@dataclass
class MaskStack:
    logits: torch.Tensor  # (B, N_FL, T, K, H, W)

    @property
    def probs(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)

    @property
    def n_layers(self) -> int:
        return self.logits.shape[1]

    def final(self) -> torch.Tensor:
        return self.probs[:, -1]


class FusionLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.point_to_patch = CrossAttentionBlock(dim, heads)
        self.point_sa = CrossAttentionBlock(dim, heads, self_attention=True)
        self.point_tsa = CrossAttentionBlock(dim, heads, self_attention=True)
        self.mlp = FeedForward(dim, ffn_dim)
        self.patch_to_point = CrossAttentionBlock(dim, heads)


def point_to_patch_ca(block: CrossAttentionBlock, points, patches, point_pos=None, patch_pos=None):
    """Each point token attends to the patch tokens of its own frame: p = Attn(p, F)."""
    return block(points, patches, point_pos, patch_pos)


def point_sa(block: CrossAttentionBlock, points, point_pos=None):
    """Point tokens of one frame attend to each other: p = Attn(p, P^t)."""
    return block(points, x_pos=point_pos)


def point_temporal_sa(block: CrossAttentionBlock, trajectory_tokens, time_pos=None):
    """Each point attends along its own trajectory: tokens (B*N, T, d)."""
    return block(trajectory_tokens, x_pos=time_pos)


def patch_to_point_ca(block: CrossAttentionBlock, patches, points, patch_pos=None, point_pos=None):
    """Each patch token attends to the frame's point tokens: f = Attn(f, P^t)."""
    return block(patches, points, patch_pos, point_pos)


def fusion_forward(layers, cfg: FusionConfig, patch: PatchTokens, mask_tokens: torch.Tensor,
                   point_tokens: Optional[torch.Tensor] = None, point_positions: Optional[torch.Tensor] = None):
    """Run the fusion stack.

    patch.tokens (B, T, Np, d); mask_tokens (K, d); point_tokens (B, N, T, d)
    with point_positions (B, N, T, 2) in pixels, or None when points are off.
    Returns a list with one ``(patch_tokens, mask_tokens)`` snapshot per layer,
    shapes (B, T, Np, d) and (B, T, K, d).
    """
    if cfg.use_points and point_tokens is None:
        raise ConfigError("use_points is on but no point tokens were supplied")
    B, T, Np, d = patch.tokens.shape
    K = mask_tokens.shape[0]
    H, W = patch.image_size
    dtype = patch.tokens.dtype
    f = patch.tokens.reshape(B * T, Np, d)
    f_pos = patch.pos.to(dtype)
    m = mask_tokens.to(dtype)[None].expand(B * T, K, d)
    use_points = cfg.use_points
    if use_points:
        N = point_tokens.shape[1]
        p = point_tokens.permute(0, 2, 1, 3).reshape(B * T, N, d)
        unit = pixel_to_unit(point_positions.to(dtype), H, W).permute(0, 2, 1, 3).reshape(B * T, N, 2)
        tok = torch.cat([p, m], 1)
        tok_pos = torch.cat([sine_encoding(unit, d), torch.zeros(B * T, K, d, dtype=dtype)], 1)
    else:
        N = 0
        tok = m
        tok_pos = None
    t_pos = temporal_encoding(T, d, dtype)
    snapshots = []
    for layer in layers:
        if cfg.use_point_ca:
            tok = point_to_patch_ca(layer.point_to_patch, tok, f, tok_pos, f_pos)
        if cfg.use_point_sa:
            tok = point_sa(layer.point_sa, tok, tok_pos)
        if cfg.use_point_tsa and use_points:
            pts = tok[:, :N].reshape(B, T, N, d).permute(0, 2, 1, 3).reshape(B * N, T, d)
            pts = point_temporal_sa(layer.point_tsa, pts, t_pos)
            pts = pts.view(B, N, T, d).permute(0, 2, 1, 3).reshape(B * T, N, d)
            tok = torch.cat([pts, tok[:, N:]], 1)
        if cfg.use_mlp:
            tok = layer.mlp(tok)
        f = patch_to_point_ca(layer.patch_to_point, f, tok, f_pos, tok_pos)
        snapshots.append((f.view(B, T, Np, d), tok[:, N:].reshape(B, T, K, d)))
    return snapshots


class MaskDecoder(nn.Module):
    """Progressive transposed-conv upsampling of patch tokens plus the mask-token MLP.

    Token grids of every scale are added as the path reaches their
    resolution; backbone maps at finer strides are added as skips.
    """

    def __init__(self, dim: int, strides, skip_channels: dict, out_dim: int, classes: int):
        super().__init__()
        self.strides = tuple(strides)
        lo, hi = min(strides), max(strides)
        self.out_dim = out_dim
        chans = {}
        s = hi
        while s >= 1:
            chans[s] = dim if s >= lo else max(out_dim, dim * s // lo)
            s //= 2
        self.chans = chans
        ups, norms = [], []
        s = hi
        while s > 1:
            ups.append(nn.ConvTranspose2d(chans[s], chans[s // 2], 2, 2))
            norms.append(nn.GroupNorm(_groups(chans[s // 2]), chans[s // 2]))
            s //= 2
        self.ups = nn.ModuleList(ups)
        self.norms = nn.ModuleList(norms)
        self.skip_proj = nn.ModuleDict({str(s): nn.Conv2d(c, chans[s], 1) for s, c in skip_channels.items()
                                        if s in chans and s < lo})
        self.head = nn.Conv2d(chans[1], out_dim, 1) if chans[1] != out_dim else nn.Identity()
        self.token_mlp = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim), nn.GELU(),
                                       nn.Linear(dim, out_dim))
        for mod in self.token_mlp:
            if isinstance(mod, nn.Linear):
                _init_linear(mod)

    def prepare_skips(self, patch: PatchTokens) -> dict:
        out = {}
        for key, proj in self.skip_proj.items():
            s = int(key)
            f = patch.skips[s]
            B, T = f.shape[:2]
            out[s] = proj(f.reshape(B * T, *f.shape[2:]))
        return out

    def upscale(self, patch: PatchTokens, tokens: torch.Tensor, skips: dict) -> torch.Tensor:
        """tokens (B, T, Np, d) -> per-pixel features (B*T, out_dim, H, W)."""
        grids = {}
        view = patch.with_tokens(tokens)
        for i, s in enumerate(patch.strides):
            g = view.grid(i)
            grids[s] = g.reshape(-1, *g.shape[2:])
        s = max(self.strides)
        x = grids[s]
        for up, norm in zip(self.ups, self.norms):
            x = F.gelu(norm(up(x)))
            s //= 2
            if s in grids:
                x = x + grids[s]
            if s in skips:
                x = x + skips[s]
        return self.head(x)

    @staticmethod
    def mask_logits(mask_vectors: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        """Per-pixel inner product: (B*T, K, c) x (B*T, c, H, W) -> (B*T, K, H, W)."""
        return torch.einsum("nkc,nchw->nkhw", mask_vectors, features)


def decode_masks(decoder: MaskDecoder, patch: PatchTokens, snapshot, skips: Optional[dict] = None) -> torch.Tensor:
    """Logits (B, T, K, H, W) for one fusion-layer snapshot; masks are their sigmoid."""
    tokens, masks = snapshot
    B, T, K, d = masks.shape
    if skips is None:
        skips = decoder.prepare_skips(patch)
    feats = decoder.upscale(patch, tokens, skips)
    vec = decoder.token_mlp(masks.reshape(B * T, K, d))
    logits = decoder.mask_logits(vec, feats)
    return logits.view(B, T, K, *logits.shape[-2:])


class SegmenterModel(nn.Module):
    def __init__(self, encoder_cfg: Optional[EncoderConfig] = None, cfg: Optional[FusionConfig] = None,
                 point_dim: Optional[int] = None):
        super().__init__()
        self.encoder_cfg = encoder_cfg or EncoderConfig()
        self.cfg = cfg or FusionConfig()
        self.cfg.validate()
        d = self.encoder_cfg.dim
        self.encoder = Encoder(self.encoder_cfg)
        self.point_proj = nn.Linear(point_dim or d, d)
        _init_linear(self.point_proj)
        self.mask_tokens = nn.Parameter(torch.zeros(self.cfg.classes, d))
        nn.init.trunc_normal_(self.mask_tokens, std=0.02)
        self.layers = nn.ModuleList(FusionLayer(d, self.cfg.heads, self.cfg.ffn_dim) for _ in range(self.cfg.layers))
        self.decoder = MaskDecoder(d, self.encoder_cfg.strides, self.encoder.skip_channels(),
                                   self.cfg.decoder_dim, self.cfg.classes)

    def forward(self, frames: torch.Tensor, point_tokens: Optional[torch.Tensor] = None,
                point_positions: Optional[torch.Tensor] = None) -> MaskStack:
        patch = self.encoder(frames)
        if self.cfg.use_points:
            if point_tokens is None or point_positions is None:
                raise ConfigError("use_points is on but no tracker output was supplied")
            pt = self.point_proj(point_tokens.to(patch.tokens.dtype))
        else:
            pt = None
        snaps = fusion_forward(self.layers, self.cfg, patch, self.mask_tokens, pt, point_positions)
        skips = self.decoder.prepare_skips(patch)
        logits = torch.stack([decode_masks(self.decoder, patch, snap, skips) for snap in snaps], 1)
        return MaskStack(logits)
