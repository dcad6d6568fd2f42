import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pointseg.encoder import (CrossAttentionBlock, Encoder, EncoderConfig, MSDeformAttn, MultiHeadAttention,
                              encode, positional_encoding_2d, sample_map, sine_encoding)
from pointseg.errors import ConfigError


def tiny(**kw):
    base = dict(dim=16, strides=(2, 4), layers=1, heads=2, points=2, ffn_dim=32)
    base.update(kw)
    return EncoderConfig(**base)


def test_token_count_default_geometry():
    torch.manual_seed(0)
    enc = Encoder(EncoderConfig(dim=32, heads=4, ffn_dim=64))
    out = enc(torch.rand(1, 2, 64, 64))
    assert out.tokens.shape == (1, 2, 64 + 16 + 4, 32)
    assert out.shapes == [(8, 8), (4, 4), (2, 2)]
    assert out.pos.shape == (84, 32)
    assert torch.isfinite(out.tokens).all()
    assert set(out.skips) == {1, 2, 4}


def test_identical_frames_identical_tokens():
    torch.manual_seed(0)
    enc = Encoder(tiny()).eval()
    f = torch.rand(1, 1, 8, 8)
    out = enc(torch.cat([f, f, torch.rand(1, 1, 8, 8)], 1)).tokens
    assert torch.equal(out[0, 0], out[0, 1])
    assert not torch.equal(out[0, 0], out[0, 2])


def test_frames_are_independent():
    torch.manual_seed(0)
    enc = Encoder(tiny()).double().eval()
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    alone = enc(x[:, 1:2]).tokens[0, 0]
    together = enc(x).tokens[0, 1]
    assert torch.allclose(alone, together, atol=1e-12)


def test_modes_share_shapes():
    x = torch.rand(2, 2, 16, 16)
    a = Encoder(tiny(attention="dense"))(x)
    b = Encoder(tiny(attention="deformable"))(x)
    assert a.tokens.shape == b.tokens.shape and a.shapes == b.shapes


def test_indivisible_size_rejected():
    with pytest.raises(ConfigError, match="divisible"):
        Encoder(tiny())(torch.rand(1, 1, 10, 8))
    with pytest.raises(ConfigError):
        EncoderConfig(dim=18, heads=4).validate()
    with pytest.raises(ConfigError):
        positional_encoding_2d((2, 2), 6)


@settings(max_examples=15, deadline=None)
@given(st.sampled_from([(2,), (2, 4), (4, 8), (2, 4, 8)]), st.integers(1, 2), st.integers(1, 2),
       st.integers(1, 3), st.sampled_from(["dense", "deformable"]), st.sampled_from([8, 16]))
def test_shape_contract(strides, B, T, mult, mode, dim):
    H = W = max(strides) * mult
    cfg = tiny(strides=strides, attention=mode, dim=dim)
    out = Encoder(cfg)(torch.rand(B, T, H, W))
    n = sum((H // s) * (W // s) for s in strides)
    assert out.tokens.shape == (B, T, n, dim)
    assert out.shapes == [(H // s, W // s) for s in strides]


def test_encode_accepts_numpy_clip():
    enc = Encoder(tiny())
    out = encode(np.random.rand(3, 8, 8).astype(np.float32), enc)
    assert out.tokens.shape[:2] == (1, 3)


def test_sine_encoding_at_origin():
    e = sine_encoding(torch.zeros(1, 2), 16)[0]
    q = 4
    assert torch.all(e[0:q] == 0) and torch.all(e[q:2 * q] == 1)
    assert torch.all(e[2 * q:3 * q] == 0) and torch.all(e[3 * q:] == 1)


@pytest.mark.parametrize("shape", [(64, 64), (1, 64), (37, 5), (8, 8)])
@pytest.mark.parametrize("dim", [8, 16])
def test_positional_encodings_distinct(shape, dim):
    pe = positional_encoding_2d(shape, dim, dtype=torch.float64)
    assert pe.shape == (shape[0] * shape[1], dim)
    assert pe.abs().max() <= 1.0
    d = torch.cdist(pe, pe)
    d.fill_diagonal_(float("inf"))
    assert d.min() > 1e-6


def _identity_deform(levels=1, points=1, heads=1, dim=4):
    attn = MSDeformAttn(dim, heads, levels, points).double()
    with torch.no_grad():
        attn.offsets.bias.zero_()
        attn.value_proj.weight.copy_(torch.eye(dim))
        attn.value_proj.bias.zero_()
        attn.out_proj.weight.copy_(torch.eye(dim))
        attn.out_proj.bias.zero_()
    return attn


def test_deformable_reduces_to_bilinear_lookup():
    torch.manual_seed(0)
    attn = _identity_deform()
    feat = torch.rand(1, 4, 5, 6, dtype=torch.float64)
    value = feat.flatten(2).transpose(1, 2)
    ref = torch.rand(1, 7, 2, dtype=torch.float64)
    query = torch.rand(1, 7, 4, dtype=torch.float64)
    out = attn(query, ref, value, [(5, 6)])
    assert torch.allclose(out, sample_map(feat, ref), atol=1e-12)


def test_deformable_weights_sum_to_one_and_constant_field():
    torch.manual_seed(1)
    attn = MSDeformAttn(8, 2, 2, 3).double()
    torch.nn.init.normal_(attn.weights.weight)
    torch.nn.init.normal_(attn.offsets.weight)
    query = torch.rand(2, 5, 8, dtype=torch.float64)
    ref = torch.rand(2, 5, 2, dtype=torch.float64)
    shapes = [(4, 4), (2, 2)]
    const = torch.rand(8, dtype=torch.float64)
    value = const.expand(2, 20, 8)
    out, w = attn(query, ref, value, shapes, return_weights=True)
    assert torch.allclose(w.flatten(3).sum(-1), torch.ones(2, 5, 2, dtype=torch.float64))
    expected = attn.out_proj(attn.value_proj(const))
    assert torch.allclose(out, expected.expand_as(out), atol=1e-12)


def test_attention_weights_softmax():
    mha = MultiHeadAttention(8, 2)
    _, w = mha(torch.rand(1, 3, 8), torch.rand(1, 5, 8), torch.rand(1, 5, 8), return_weights=True)
    assert torch.allclose(w.sum(-1), torch.ones(1, 2, 3))


def test_encoder_gradient_check(f64):
    torch.manual_seed(0)
    enc = Encoder(tiny(dim=8, ffn_dim=16, heads=2)).double()
    base = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    probe = torch.randn(1, 1, 4 * 4 + 2 * 2, 8, dtype=torch.float64)

    def f(pixel):
        x = base.clone()
        x[0, 0, 3, 5] = pixel
        return (enc(x).tokens * probe).sum()

    p = torch.tensor(0.37, dtype=torch.float64, requires_grad=True)
    auto = torch.autograd.grad(f(p), p)[0].item()
    h = 1e-6
    fd = (f(p.detach() + h) - f(p.detach() - h)).item() / (2 * h)
    assert auto == pytest.approx(fd, rel=1e-3)
