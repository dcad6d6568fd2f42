import numpy as np
import pytest
import torch

from pointseg.encoder import CrossAttentionBlock, EncoderConfig, PatchTokens
from pointseg.errors import ConfigError
from pointseg.losses import LossWeights, mask_loss, temporal_loss
from pointseg.segmenter import (ABLATION_ROWS, FusionConfig, MaskDecoder, SegmenterModel, decode_masks,
                                fusion_forward, patch_to_point_ca, point_sa, point_temporal_sa, point_to_patch_ca)

D = torch.float64


def tiny_enc(dim=16):
    return EncoderConfig(dim=dim, strides=(2, 4), layers=1, heads=2, points=2, ffn_dim=32)


def tiny_model(dim=16, **kw):
    cfg = FusionConfig(heads=2, ffn_dim=32, decoder_dim=8, **kw)
    return SegmenterModel(tiny_enc(dim), cfg, point_dim=dim)


def _block():
    torch.manual_seed(0)
    return CrossAttentionBlock(8, 2).double()


def _zero_values(block):
    torch.nn.init.zeros_(block.attn.v_proj.weight)
    torch.nn.init.zeros_(block.attn.v_proj.bias)


def _value_of(block, token):
    a = block.attn
    return a.out_proj(a.v_proj(block.norm_kv(token)))


@pytest.mark.parametrize("fn", ["point_to_patch_ca", "patch_to_point_ca"])
def test_cross_attention_properties(fn):
    op = {"point_to_patch_ca": point_to_patch_ca, "patch_to_point_ca": patch_to_point_ca}[fn]
    block = _block()
    x = torch.rand(1, 3, 8, dtype=D)
    x_pos = torch.rand(1, 3, 8, dtype=D)
    one = torch.rand(1, 1, 8, dtype=D)
    out = op(block, x, one, x_pos, torch.rand(1, 1, 8, dtype=D))
    assert torch.allclose(out, x + _value_of(block, one), atol=1e-12)

    ctx = torch.rand(1, 6, 8, dtype=D)
    ctx_pos = torch.rand(1, 6, 8, dtype=D)
    perm = torch.randperm(6)
    a = op(block, x, ctx, x_pos, ctx_pos)
    b = op(block, x, ctx[:, perm], x_pos, ctx_pos[:, perm])
    assert torch.allclose(a, b, atol=1e-12)

    _zero_values(block)
    assert torch.equal(op(block, x, ctx, x_pos, ctx_pos), x)


def test_point_sa_properties():
    block = CrossAttentionBlock(8, 2, self_attention=True).double()
    one = torch.rand(1, 1, 8, dtype=D)
    assert torch.allclose(point_sa(block, one), one + _value_of(block, one), atol=1e-12)
    x = torch.rand(1, 5, 8, dtype=D)
    pos = torch.rand(1, 5, 8, dtype=D)
    perm = torch.randperm(5)
    assert torch.allclose(point_sa(block, x, pos)[:, perm], point_sa(block, x[:, perm], pos[:, perm]), atol=1e-12)
    _zero_values(block)
    assert torch.equal(point_sa(block, x, pos), x)


def test_point_temporal_sa_properties():
    from pointseg.encoder import temporal_encoding

    block = CrossAttentionBlock(8, 2, self_attention=True).double()
    single = torch.rand(4, 1, 8, dtype=D)
    assert torch.allclose(point_temporal_sa(block, single, temporal_encoding(1, 8, D)),
                          single + _value_of(block, single), atol=1e-12)
    x = torch.rand(3, 5, 8, dtype=D)
    tpos = temporal_encoding(5, 8, D)
    perm = torch.randperm(5)
    a = point_temporal_sa(block, x, tpos)[:, perm]
    b = point_temporal_sa(block, x[:, perm], tpos[perm])
    assert torch.allclose(a, b, atol=1e-12)
    _zero_values(block)
    assert torch.equal(point_temporal_sa(block, x, tpos), x)


def _inputs(B=1, T=2, N=4, H=8, W=8, dim=16, dtype=torch.float32):
    g = torch.Generator().manual_seed(0)
    frames = torch.rand(B, T, H, W, generator=g, dtype=dtype)
    tok = torch.randn(B, N, T, dim, generator=g, dtype=dtype)
    pos = torch.rand(B, N, T, 2, generator=g, dtype=dtype) * (W - 1)
    return frames, tok, pos


def test_forward_shapes_and_range():
    torch.manual_seed(0)
    model = tiny_model()
    frames, tok, pos = _inputs()
    stack = model(frames, tok, pos)
    assert stack.logits.shape == (1, 3, 2, 1, 8, 8)
    assert stack.n_layers == 3
    p = stack.probs
    assert torch.all((p > 0) & (p < 1))


def test_snapshot_count():
    torch.manual_seed(0)
    model = tiny_model()
    frames, tok, pos = _inputs()
    patch = model.encoder(frames)
    snaps = fusion_forward(model.layers, model.cfg, patch, model.mask_tokens, model.point_proj(tok), pos)
    assert len(snaps) == 3
    assert snaps[0][0].shape == patch.tokens.shape and snaps[0][1].shape == (1, 2, 1, 16)


def test_points_required_when_enabled():
    model = tiny_model()
    frames, _, _ = _inputs()
    with pytest.raises(ConfigError):
        model(frames)


def test_zero_mask_vector_gives_half():
    torch.manual_seed(0)
    model = tiny_model()
    last = model.decoder.token_mlp[-1]
    torch.nn.init.zeros_(last.weight)
    torch.nn.init.zeros_(last.bias)
    frames, tok, pos = _inputs()
    assert torch.all(model(frames, tok, pos).probs == 0.5)


def test_logits_bilinear_in_mask_vector():
    feats = torch.randn(2, 5, 4, 4, dtype=D)
    vec = torch.randn(2, 3, 5, dtype=D)
    a = MaskDecoder.mask_logits(vec, feats)
    assert torch.allclose(MaskDecoder.mask_logits(2 * vec, feats), 2 * a, atol=1e-12)


def test_output_resolution_matches_input():
    torch.manual_seed(0)
    model = SegmenterModel(EncoderConfig(dim=16, heads=2, layers=1, ffn_dim=32),
                           FusionConfig(layers=1, heads=2, ffn_dim=32), point_dim=16)
    frames, tok, pos = _inputs(H=64, W=64, T=1, N=2)
    assert model(frames, tok, pos).logits.shape[-2:] == (64, 64)


@pytest.mark.parametrize("row", ABLATION_ROWS)
def test_ablation_rows_run_forward_backward(row):
    torch.manual_seed(0)
    model = tiny_model(**dict(zip(("use_points", "use_point_ca", "use_mlp", "use_point_sa", "use_point_tsa"), row)))
    frames, tok, pos = _inputs()
    stack = model(frames, tok, pos) if row[0] else model(frames)
    assert stack.logits.shape == (1, 3, 2, 1, 8, 8)
    gt = (torch.rand(1, 2, 8, 8) > 0.5).float()
    loss = mask_loss(stack.probs, gt, LossWeights())[0] + temporal_loss(stack.probs, pos, None, LossWeights())[0]
    loss.backward()
    assert all(torch.isfinite(p.grad).all() for p in model.parameters() if p.grad is not None)


def test_tsa_toggle_changes_output():
    torch.manual_seed(0)
    model = tiny_model()
    frames, tok, pos = _inputs(T=3)
    on = model(frames, tok, pos).logits
    model.cfg.use_point_tsa = False
    off = model(frames, tok, pos).logits
    assert (on - off).abs().max() > 0


def test_deep_supervision_reaches_first_layer():
    torch.manual_seed(0)
    model = tiny_model()
    frames, tok, pos = _inputs()
    gt = (torch.rand(1, 2, 8, 8) > 0.5).float()
    loss, _ = mask_loss(model(frames, tok, pos).probs, gt, LossWeights(mask_layers=(1.0, 0.0, 0.0)))
    loss.backward()
    first = [p.grad for p in model.layers[0].parameters() if p.grad is not None]
    assert first and sum(g.abs().sum() for g in first) > 0
    later = [p.grad for p in model.layers[2].parameters() if p.grad is not None and p.grad.abs().sum() > 0]
    assert not later


def test_end_to_end_gradcheck(f64):
    torch.manual_seed(0)
    model = tiny_model(dim=16).double()
    frames, tok, pos = _inputs(dtype=D)
    gt = (torch.rand(1, 2, 8, 8, dtype=D) > 0.5).to(D)
    w = LossWeights()
    params = [model.mask_tokens, model.layers[0].point_to_patch.attn.q_proj.weight,
              model.encoder.proj[0][0].weight, model.decoder.ups[0].weight]

    def loss_fn():
        probs = model(frames, tok, pos).probs
        return mask_loss(probs, gt, w)[0] + temporal_loss(probs, pos, None, w)[0]

    grads = torch.autograd.grad(loss_fn(), params)
    rng = np.random.default_rng(0)
    h = 1e-6
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            for idx in rng.choice(flat.numel(), 3, replace=False):
                old = flat[idx].item()
                flat[idx] = old + h
                up = loss_fn().item()
                flat[idx] = old - h
                down = loss_fn().item()
                flat[idx] = old
                fd = (up - down) / (2 * h)
                assert g.reshape(-1)[idx].item() == pytest.approx(fd, rel=1e-3, abs=1e-9)
