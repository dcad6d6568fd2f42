"""Per-frame CNN + transformer encoder producing multi-scale patch tokens.

Also home to the attention building blocks reused by the tracker and the
fusion layers (plain multi-head attention, pre-norm residual blocks,
multi-scale deformable attention) and the sinusoidal encodings.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

ATTENTION_MODES = ("deformable", "dense")
BACKBONES = ("small", "resnet50")


@dataclass
class EncoderConfig:
    dim: int = 128
    strides: tuple = (8, 16, 32)
    layers: int = 2
    heads: int = 4
    attention: str = "deformable"
    points: int = 4  # deformable sampling points per head and scale
    backbone: str = "small"
    ffn_dim: int = 256

    def validate(self):
        if self.dim % self.heads:
            raise ConfigError(f"token dim {self.dim} must be divisible by heads {self.heads}")
        if self.dim % 4:
            raise ConfigError(f"token dim {self.dim} must be divisible by 4 for 2D positional encodings")
        if len(self.strides) < 1:
            raise ConfigError("at least one scale is required")
        for s in self.strides:
            if s < 2 or s & (s - 1):
                raise ConfigError(f"strides must be powers of two >= 2, got {s}")
        if list(self.strides) != sorted(self.strides):
            raise ConfigError("strides must be increasing")
        if self.attention not in ATTENTION_MODES:
            raise ConfigError(f"attention must be one of {ATTENTION_MODES}")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}")
        if self.layers < 0 or self.points < 1:
            raise ConfigError("layers >= 0 and points >= 1 required")


# -- encodings ------------------------------------------------------------------

def sine_encoding(coords: torch.Tensor, dim: int, temperature: float = 10000.0) -> torch.Tensor:
    """Sinusoidal encoding of normalized 2D positions.

    coords: (..., 2) with x, y in [0, 1].  Output (..., dim) laid out as
    [sin x, cos x, sin y, cos y], each block dim // 4 wide.
    """
    if dim % 4:
        raise ConfigError(f"encoding dim must be divisible by 4, got {dim}")
    quarter = dim // 4
    k = torch.arange(quarter, dtype=coords.dtype, device=coords.device)
    freqs = 2 * math.pi / temperature ** (k / quarter)
    parts = []
    for axis in range(2):
        ang = coords[..., axis:axis + 1] * freqs
        parts += [torch.sin(ang), torch.cos(ang)]
    return torch.cat(parts, dim=-1)


def positional_encoding_2d(shape, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Encodings of an (h, w) grid's cell centers, row-major, shape (h*w, dim)."""
    h, w = shape
    if dim % 4:
        raise ConfigError(f"encoding dim must be divisible by 4, got {dim}")
    ys = (torch.arange(h, dtype=dtype) + 0.5) / h
    xs = (torch.arange(w, dtype=dtype) + 0.5) / w
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    coords = torch.stack([gx, gy], dim=-1).reshape(-1, 2)
    return sine_encoding(coords, dim)


def temporal_encoding(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    t = torch.arange(length, dtype=dtype)[:, None]
    k = torch.arange(dim // 2, dtype=dtype)
    freqs = 1.0 / 10000.0 ** (2 * k / dim)
    ang = t * freqs
    out = torch.zeros(length, dim, dtype=dtype)
    out[:, 0::2] = torch.sin(ang)
    out[:, 1::2] = torch.cos(ang[:, : dim - dim // 2])
    return out


def pixel_to_unit(points: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Pixel-index coordinates -> [0, 1] normalized coordinates (cell-center convention)."""
    scale = points.new_tensor([width, height])
    return (points + 0.5) / scale


def sample_map(feature: torch.Tensor, unit_xy: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of ``feature`` (B, C, h, w) at ``unit_xy`` (B, Q, 2) -> (B, Q, C).

    Border padding; unit coordinates follow the cell-center convention so the
    same location can be sampled from maps of any resolution.
    """
    grid = (unit_xy * 2 - 1).unsqueeze(2)
    out = F.grid_sample(feature, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out.squeeze(-1).transpose(1, 2)


# -- attention -------------------------------------------------------------------

def _init_linear(layer: nn.Linear):
    nn.init.trunc_normal_(layer.weight, std=0.02)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        # no output bias: zero value weights then give an exact residual identity
        self.out_proj = nn.Linear(dim, dim, bias=False)
        for layer in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            _init_linear(layer)

    def forward(self, q, k, v, key_padding_mask=None, return_weights=False):
        B, Q, D = q.shape
        K = k.shape[1]
        h = self.heads
        qh = self.q_proj(q).view(B, Q, h, D // h).transpose(1, 2)
        kh = self.k_proj(k).view(B, K, h, D // h).transpose(1, 2)
        vh = self.v_proj(v).view(B, K, h, D // h).transpose(1, 2)
        logits = qh @ kh.transpose(-1, -2) / math.sqrt(D // h)
        if key_padding_mask is not None:
            logits = logits.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        weights = logits.softmax(dim=-1)
        out = (weights @ vh).transpose(1, 2).reshape(B, Q, D)
        out = self.out_proj(out)
        return (out, weights) if return_weights else out


class CrossAttentionBlock(nn.Module):
    """Pre-norm residual attention: ``x + Attn(LN(x) + pos_x, LN(ctx) + pos_ctx, LN(ctx))``.

    Positional encodings enter queries and keys only, never values.
    """

    def __init__(self, dim: int, heads: int, self_attention: bool = False):
        super().__init__()
        self.self_attention = self_attention
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = self.norm_q if self_attention else nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)

    def forward(self, x, ctx=None, x_pos=None, ctx_pos=None):
        if self.self_attention:
            ctx, ctx_pos = x, x_pos
        q = self.norm_q(x)
        kv = self.norm_kv(ctx)
        qk = q if x_pos is None else q + x_pos
        kk = kv if ctx_pos is None else kv + ctx_pos
        return x + self.attn(qk, kk, kv)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        _init_linear(self.fc1)
        _init_linear(self.fc2)

    def forward(self, x):
        return x + self.fc2(F.gelu(self.fc1(self.norm(x))))


class MSDeformAttn(nn.Module):
    """Multi-scale deformable attention.

    Each query predicts ``points`` sampling offsets and weights per head and
    scale around its reference point; the output is the softmax-weighted sum
    of bilinearly sampled values.
    """

    def __init__(self, dim: int, heads: int, levels: int, points: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads, self.levels, self.points = dim, heads, levels, points
        self.offsets = nn.Linear(dim, heads * levels * points * 2)
        self.weights = nn.Linear(dim, heads * levels * points)
        self.value_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self._reset()

    def _reset(self):
        nn.init.zeros_(self.offsets.weight)
        theta = torch.arange(self.heads, dtype=torch.float32) * (2 * math.pi / self.heads)
        grid = torch.stack([theta.cos(), theta.sin()], -1)
        grid = grid / grid.abs().max(-1, keepdim=True)[0]
        grid = grid.view(self.heads, 1, 1, 2).repeat(1, self.levels, self.points, 1)
        for i in range(self.points):
            grid[:, :, i, :] *= i + 1
        with torch.no_grad():
            self.offsets.bias.copy_(grid.reshape(-1))
        nn.init.zeros_(self.weights.weight)
        nn.init.zeros_(self.weights.bias)
        _init_linear(self.value_proj)
        _init_linear(self.out_proj)

    def forward(self, query, reference, value, shapes, return_weights=False):
        """query (B, Q, D); reference (B, Q, 2) in [0, 1]; value (B, sum h*w, D)."""
        B, Q, D = query.shape
        h, L, P = self.heads, self.levels, self.points
        if len(shapes) != L:
            raise ValueError(f"expected {L} levels, got {len(shapes)}")
        v = self.value_proj(value)
        off = self.offsets(query).view(B, Q, h, L, P, 2)
        w = self.weights(query).view(B, Q, h, L * P).softmax(-1).view(B, Q, h, L, P)
        out = query.new_zeros(B * h, D // h, Q)
        start = 0
        for lvl, (hh, ww) in enumerate(shapes):
            n = hh * ww
            vl = v[:, start:start + n].view(B, n, h, D // h).permute(0, 2, 3, 1).reshape(B * h, D // h, hh, ww)
            start += n
            norm = off.new_tensor([ww, hh])
            loc = reference[:, :, None, None, :] + off[:, :, :, lvl] / norm  # (B, Q, h, P, 2)
            grid = (loc * 2 - 1).permute(0, 2, 1, 3, 4).reshape(B * h, Q, P, 2)
            sampled = F.grid_sample(vl, grid, mode="bilinear", padding_mode="border", align_corners=False)
            wl = w[:, :, :, lvl].permute(0, 2, 1, 3).reshape(B * h, 1, Q, P)
            out = out + (sampled * wl).sum(-1)
        out = out.view(B, h, D // h, Q).permute(0, 3, 1, 2).reshape(B, Q, D)
        out = self.out_proj(out)
        return (out, w) if return_weights else out


class EncoderLayer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.mode = cfg.attention
        self.norm = nn.LayerNorm(cfg.dim)
        if self.mode == "deformable":
            self.attn = MSDeformAttn(cfg.dim, cfg.heads, len(cfg.strides), cfg.points)
        else:
            self.attn = MultiHeadAttention(cfg.dim, cfg.heads)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_dim)

    def forward(self, x, pos, reference, shapes):
        y = self.norm(x)
        if self.mode == "deformable":
            x = x + self.attn(y + pos, reference, y, shapes)
        else:
            x = x + self.attn(y + pos, y + pos, y)
        return self.ffn(x)


# -- backbones -------------------------------------------------------------------

SMALL_CHANNELS = {1: 16, 2: 32, 4: 48, 8: 64, 16: 96, 32: 128, 64: 128, 128: 128}


def _groups(c):
    # at least two channels per group so 1x1 maps still normalize
    return 8 if c % 8 == 0 and c >= 16 else 1


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 2):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1)
        self.norm1 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.skip = nn.Conv2d(cin, cout, 1, stride) if (stride != 1 or cin != cout) else nn.Identity()

    def forward(self, x):
        y = F.gelu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.gelu(y + self.skip(x))


class SmallBackbone(nn.Module):
    """Stride-1 stem followed by one residual block per halving of resolution."""

    def __init__(self, max_stride: int):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(1, SMALL_CHANNELS[1], 3, 1, 1), nn.GELU(),
                                  nn.Conv2d(SMALL_CHANNELS[1], SMALL_CHANNELS[1], 3, 1, 1), nn.GELU())
        blocks = []
        s = 1
        while s < max_stride:
            blocks.append(ResBlock(SMALL_CHANNELS[s], SMALL_CHANNELS[2 * s]))
            s *= 2
        self.blocks = nn.ModuleList(blocks)
        self.channels = {2 ** i: SMALL_CHANNELS[2 ** i] for i in range(len(blocks) + 1)}

    def forward(self, x):
        feats = {1: self.stem(x)}
        y = feats[1]
        s = 1
        for block in self.blocks:
            y = block(y)
            s *= 2
            feats[s] = y
        return feats


class ResNet50Backbone(nn.Module):
    """Larger option: torchvision ResNet-50 (random init) on single-channel frames."""

    def __init__(self, max_stride: int):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        net.conv1 = nn.Conv2d(1, 64, 7, 2, 3, bias=False)
        self.fine = nn.Sequential(nn.Conv2d(1, SMALL_CHANNELS[1], 3, 1, 1), nn.GELU())
        self.conv1, self.bn1, self.maxpool = net.conv1, net.bn1, net.maxpool
        self.layers = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
        if max_stride > 32:
            raise ConfigError("resnet50 backbone supports strides up to 32")
        self.channels = {1: SMALL_CHANNELS[1], 2: 64, 4: 256, 8: 512, 16: 1024, 32: 2048}

    def forward(self, x):
        feats = {1: self.fine(x)}
        y = F.relu(self.bn1(self.conv1(x)))
        feats[2] = y
        y = self.maxpool(y)
        for i, layer in enumerate(self.layers):
            y = layer(y)
            feats[4 * 2 ** i] = y
        return feats


# -- encoder ---------------------------------------------------------------------

@dataclass
class PatchTokens:
    tokens: torch.Tensor  # (B, T, N_patches, d)
    pos: torch.Tensor  # (N_patches, d)
    shapes: list  # [(h_s, w_s)] per scale
    strides: tuple
    skips: dict = field(default_factory=dict)  # stride -> (B, T, C, h, w), strides below the token scales
    image_size: tuple = (0, 0)

    @property
    def n_patches(self) -> int:
        return self.tokens.shape[2]

    def centers(self) -> torch.Tensor:
        """Normalized (x, y) centers of every token, (N_patches, 2)."""
        out = []
        for h, w in self.shapes:
            ys = (torch.arange(h, dtype=self.tokens.dtype) + 0.5) / h
            xs = (torch.arange(w, dtype=self.tokens.dtype) + 0.5) / w
            gy, gx = torch.meshgrid(ys, xs, indexing="ij")
            out.append(torch.stack([gx, gy], -1).reshape(-1, 2))
        return torch.cat(out, 0)

    def grid(self, scale: int) -> torch.Tensor:
        """Tokens of one scale as (B, T, d, h, w)."""
        start = sum(h * w for h, w in self.shapes[:scale])
        h, w = self.shapes[scale]
        B, T, _, d = self.tokens.shape
        return self.tokens[:, :, start:start + h * w].reshape(B, T, h, w, d).permute(0, 1, 4, 2, 3)

    def with_tokens(self, tokens: torch.Tensor) -> "PatchTokens":
        return PatchTokens(tokens, self.pos, self.shapes, self.strides, self.skips, self.image_size)


def token_grid_shapes(height: int, width: int, strides) -> list:
    return [(height // s, width // s) for s in strides]


class Encoder(nn.Module):
    def __init__(self, cfg: Optional[EncoderConfig] = None):
        super().__init__()
        cfg = cfg or EncoderConfig()
        cfg.validate()
        self.cfg = cfg
        max_stride = max(cfg.strides)
        self.backbone = SmallBackbone(max_stride) if cfg.backbone == "small" else ResNet50Backbone(max_stride)
        self.proj = nn.ModuleList(
            nn.Sequential(nn.Conv2d(self.backbone.channels[s], cfg.dim, 1), nn.GroupNorm(_groups(cfg.dim), cfg.dim))
            for s in cfg.strides
        )
        self.level_embed = nn.Parameter(torch.zeros(len(cfg.strides), cfg.dim))
        nn.init.trunc_normal_(self.level_embed, std=0.02)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.dim)

    @property
    def fine_channels(self) -> int:
        return self.backbone.channels[1]

    def skip_channels(self) -> dict:
        lo = min(self.cfg.strides)
        return {s: c for s, c in self.backbone.channels.items() if s < lo}

    def forward(self, frames: torch.Tensor) -> PatchTokens:
        """frames: (B, T, H, W) -> PatchTokens; frames are encoded independently."""
        if frames.dim() != 4:
            raise ValueError(f"frames must be (B, T, H, W), got {tuple(frames.shape)}")
        B, T, H, W = frames.shape
        max_stride = max(self.cfg.strides)
        if H % max_stride or W % max_stride:
            raise ConfigError(f"frame size {H}x{W} not divisible by coarsest stride {max_stride}")
        x = frames.reshape(B * T, 1, H, W)
        feats = self.backbone(x)
        shapes = token_grid_shapes(H, W, self.cfg.strides)
        tokens, pos = [], []
        for i, s in enumerate(self.cfg.strides):
            t = self.proj[i](feats[s])
            tokens.append(t.flatten(2).transpose(1, 2))
            pos.append(positional_encoding_2d(shapes[i], self.cfg.dim, dtype=frames.dtype) + self.level_embed[i])
        tokens = torch.cat(tokens, 1)
        pos = torch.cat(pos, 0)
        out = PatchTokens(tokens, pos, shapes, tuple(self.cfg.strides), image_size=(H, W))
        ref = out.centers().to(frames.dtype).expand(B * T, -1, -1)
        for layer in self.layers:
            tokens = layer(tokens, pos, ref, shapes)
        tokens = self.norm(tokens)
        lo = min(self.cfg.strides)
        skips = {s: f.reshape(B, T, *f.shape[1:]) for s, f in feats.items() if s < lo}
        return PatchTokens(tokens.reshape(B, T, -1, self.cfg.dim), pos, shapes, tuple(self.cfg.strides),
                           skips, (H, W))


def encode(frames, encoder: Encoder) -> PatchTokens:
    """Encode a (T, H, W) array or (B, T, H, W) tensor."""
    x = torch.as_tensor(frames)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    x = x.to(next(encoder.parameters()).dtype)
    return encoder(x)
