import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from pointseg.errors import ConfigError, NumericError
from pointseg.losses import LossWeights, bilinear_sample, dice_loss, frame_pairs, mask_loss, temporal_loss
from pointseg.phantom import DatasetConfig, generate_clip, random_spec, rng_for

D = torch.float64


def test_bilinear_examples():
    f = torch.tensor([[0.0, 1.0], [2.0, 3.0]], dtype=D)
    assert bilinear_sample(f, torch.tensor([[0.5, 0.5]], dtype=D)).item() == 1.5
    g = torch.arange(12, dtype=D).view(3, 4)
    pts = torch.tensor([[j, i] for i in range(3) for j in range(4)], dtype=D)
    assert torch.equal(bilinear_sample(g, pts), g.flatten())
    # border clamp
    assert bilinear_sample(g, torch.tensor([[-3.0, 10.0]], dtype=D)).item() == g[2, 0].item()
    with pytest.raises(NumericError):
        bilinear_sample(g, torch.tensor([[float("nan"), 0.0]], dtype=D))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2 ** 31))
def test_bilinear_matches_oracle(H, W, seed):
    rng = np.random.default_rng(seed)
    field = rng.normal(size=(H, W))
    pts = rng.uniform(-1.5, max(H, W) + 0.5, size=(100, 2))
    got = bilinear_sample(torch.tensor(field), torch.tensor(pts)).numpy()
    want = [oracles.bilinear(field.tolist(), x, y) for x, y in pts]
    assert np.allclose(got, want, atol=1e-6, rtol=0)


def test_dice_loss_examples():
    g = torch.zeros(4, 4, dtype=D)
    g[0, :4] = 1
    p = torch.zeros(4, 4, dtype=D)
    p[0, :2] = 1
    p[1, 0] = 1
    assert dice_loss(p, g, 1.0).item() == pytest.approx(0.375, abs=1e-15)
    assert dice_loss(g, g, 1.0).item() <= 1.0 / (2 * 4 + 1)
    assert dice_loss(torch.zeros(3, 3, dtype=D), torch.zeros(3, 3, dtype=D)).item() == 0.0


def test_mask_loss_combines_layers():
    H = W = 2
    # uniform p = c against an all-ones 2x2 gt: 1 - (8c + 1)/(4c + 5) = 0.2 at c = 0.625
    probs = torch.full((1, 3, 1, 1, H, W), 0.625, dtype=D)
    gt = torch.ones(1, 1, H, W, dtype=D)
    total, per = mask_loss(probs, gt, LossWeights())
    assert np.allclose(per.numpy(), 0.2)
    assert total.item() == pytest.approx(0.35, abs=1e-12)
    with pytest.raises(ConfigError):
        mask_loss(probs, gt, LossWeights(mask_layers=(1.0, 1.0)))


def test_mask_loss_perfect_prediction_vanishes_up_to_smoothing():
    gt = torch.zeros(1, 2, 1, 6, 6, dtype=D)
    gt[..., 1:4, 1:5] = 1
    total, _ = mask_loss(gt[:, None].expand(1, 3, 2, 1, 6, 6), gt, LossWeights())
    assert 0 <= total.item() <= 1.75 * 1.0 / (2 * 12 + 1) + 1e-15


def _random_stack(rng, B, L, T, K, H, W):
    return torch.tensor(rng.uniform(0, 1, (B, L, T, K, H, W)), dtype=D)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_mask_loss_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    B, L, T, K = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 3)
    H, W = rng.integers(1, 9, 2)
    probs = _random_stack(rng, B, L, T, K, H, W)
    gt = torch.tensor(rng.integers(0, 2, (B, T, K, H, W)), dtype=D)
    lw = tuple(rng.uniform(0, 1, L))
    w = LossWeights(mask_layers=lw, dice=float(rng.uniform(0.5, 2)))
    total, _ = mask_loss(probs, gt, w)
    want = oracles.mask_loss(probs.tolist(), gt.tolist(), lw, w.dice)
    assert total.item() == pytest.approx(want, abs=1e-8)


def test_temporal_loss_examples():
    w = LossWeights(mask_layers=(1.0,), temporal=1.0)
    probs = torch.full((1, 1, 4, 1, 5, 5), 0.3, dtype=D)
    tracks = torch.tensor([[[[1.0, 2.0]] * 4, [[3.5, 0.5]] * 4]], dtype=D)
    assert temporal_loss(probs, tracks, None, w)[0].item() == 0.0
    probs = torch.zeros(1, 1, 2, 1, 3, 3, dtype=D)
    probs[0, 0, 0, 0, 1, 1] = 0.9
    probs[0, 0, 1, 0, 1, 1] = 0.4
    tr = torch.tensor([[[[1.0, 1.0], [1.0, 1.0]]]], dtype=D)
    assert temporal_loss(probs, tr, None, w)[0].item() == pytest.approx(0.25, abs=1e-15)
    one = torch.zeros(1, 1, 1, 1, 3, 3, dtype=D)
    assert temporal_loss(one, tr[:, :, :1], None, w)[0].item() == 0.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 31), st.booleans(), st.sampled_from(["mask", "uniform"]))
def test_temporal_loss_matches_oracle(seed, gated, layering):
    rng = np.random.default_rng(seed)
    B, L, T, K, N = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 3), rng.integers(1, 6)
    H, W = rng.integers(1, 9, 2)
    probs = _random_stack(rng, B, L, T, K, H, W)
    tracks = torch.tensor(rng.uniform(-1, max(H, W), (B, N, T, 2)), dtype=D)
    vis = torch.tensor(rng.integers(0, 2, (B, N, T)), dtype=D) if gated else None
    w = LossWeights(mask_layers=tuple(rng.uniform(0, 1, L)), temporal=float(rng.uniform(0, 100)),
                    temporal_layering=layering)
    total, _ = temporal_loss(probs, tracks, vis, w)
    want = oracles.temporal_loss(probs.tolist(), tracks.tolist(), None if vis is None else vis.tolist(),
                                 w.temporal_layers())
    assert total.item() == pytest.approx(want, abs=1e-8, rel=1e-10)


def test_temporal_loss_monotone_in_disagreement():
    rng = np.random.default_rng(1)
    probs = _random_stack(rng, 1, 3, 3, 1, 6, 6) * 0.5
    tracks = torch.tensor([[[[2.0, 2.0]] * 3]], dtype=D)
    w = LossWeights()
    base = temporal_loss(probs, tracks, None, w)[0].item()
    bumped = probs.clone()
    bumped[:, :, 2, :, 2, 2] = 1.0  # far from the other frames' values at the tracked pixel
    assert temporal_loss(bumped, tracks, None, w)[0].item() > base


def test_pair_count():
    for T in range(1, 9):
        t1, t2 = frame_pairs(T)
        assert t1.numel() == T * (T - 1) // 2 and torch.all(t1 < t2)
    t1, _ = frame_pairs(10, limit=5, generator=torch.Generator().manual_seed(0))
    assert t1.numel() == 5


def test_tracks_are_constants():
    probs = torch.rand(1, 3, 3, 1, 6, 6, dtype=D, requires_grad=True)
    tracks = (torch.rand(1, 2, 3, 2, dtype=D) * 5).requires_grad_()
    temporal_loss(probs, tracks, None, LossWeights())[0].backward()
    assert tracks.grad is None and probs.grad is not None


def test_visibility_gate_excludes_pairs():
    probs = torch.zeros(1, 1, 2, 1, 3, 3, dtype=D)
    probs[0, 0, 0] = 1.0
    tr = torch.ones(1, 1, 2, 2, dtype=D)
    w = LossWeights(mask_layers=(1.0,), temporal=1.0)
    assert temporal_loss(probs, tr, torch.tensor([[[1.0, 0.0]]], dtype=D), w)[0].item() == 0.0
    assert temporal_loss(probs, tr, torch.tensor([[[1.0, 1.0]]], dtype=D), w)[0].item() == 1.0
    ungated = LossWeights(mask_layers=(1.0,), temporal=1.0, gate_visibility=False)
    assert temporal_loss(probs, tr, torch.tensor([[[1.0, 0.0]]], dtype=D), ungated)[0].item() == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_analytic_zero_on_phantom(seed):
    spec = random_spec(rng_for([seed, 99]), DatasetConfig(), seed)
    g = generate_clip(spec, 48)
    pos = g.tracks.positions.astype(np.float64)
    rho0 = np.hypot(pos[:, 0, 0] - spec.cx, pos[:, 0, 1] - spec.cy)
    from pointseg.phantom import radial_scale

    s0 = radial_scale(0, spec)
    margin = spec.blur_sigma + 1
    keep = (rho0 >= spec.r_in * s0 + margin) & (rho0 <= spec.r_out * s0 - margin)
    masks = torch.tensor(g.masks, dtype=D)[None, None, :, None]
    tr = torch.tensor(pos[keep])[None]
    vis = torch.tensor(g.tracks.visibility[keep], dtype=D)[None]
    _, per = temporal_loss(masks, tr, vis, LossWeights(mask_layers=(1.0,), temporal=1.0))
    assert per.item() <= 1e-3


def test_gradcheck_losses():
    rng = np.random.default_rng(3)
    field = torch.tensor(rng.normal(size=(5, 6)), requires_grad=True)
    pts = torch.tensor(rng.uniform(0.2, 3.8, (7, 2)) + 0.13, requires_grad=True)
    assert torch.autograd.gradcheck(bilinear_sample, (field, pts), eps=1e-6, atol=1e-8, rtol=1e-3)

    probs = torch.tensor(rng.uniform(0.1, 0.9, (1, 3, 3, 1, 6, 6)), requires_grad=True)
    gt = torch.tensor(rng.integers(0, 2, (1, 3, 6, 6)), dtype=D)
    w = LossWeights()
    assert torch.autograd.gradcheck(lambda p: mask_loss(p, gt, w)[0], (probs,), eps=1e-6, atol=1e-8, rtol=1e-3)
    tracks = torch.tensor(rng.uniform(0.3, 4.7, (1, 4, 3, 2)))
    vis = torch.tensor(rng.integers(0, 2, (1, 4, 3)), dtype=D)
    assert torch.autograd.gradcheck(lambda p: temporal_loss(p, tracks, vis, w)[0], (probs,), eps=1e-6, atol=1e-8,
                                    rtol=1e-3)
