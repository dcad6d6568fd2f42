import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from pointseg.errors import ConfigError, InputError
from pointseg.losses import bilinear_sample
from pointseg.phantom import (DatasetConfig, PhantomSpec, ShadowSector, deform_point, generate_clip,
                              generate_records, motion_weight, radial_scale, random_spec, rng_for)


def test_radial_scale_examples():
    assert np.allclose(radial_scale(np.arange(8), PhantomSpec(amplitude=0.0)), 1.0)
    spec = PhantomSpec(amplitude=0.1, phase=0.0, cycle=8)
    assert radial_scale(2, spec) == pytest.approx(1.1, abs=1e-12)
    assert radial_scale(6, spec) == pytest.approx(0.9, abs=1e-12)


def test_center_is_fixed_and_far_background_static():
    spec = PhantomSpec(amplitude=0.1)
    for t in range(spec.frames):
        p, inside = deform_point(np.array([spec.cx, spec.cy]), t, spec)
        assert np.allclose(p, [spec.cx, spec.cy]) and inside
        far = np.array([1.0, 1.0])  # corner, rho > 1.5 r_out
        q, _ = deform_point(far, t, spec)
        assert np.array_equal(q, far)


def _dense_flow_position(p0, t_end, spec):
    """Integrate the Eulerian velocity of the radial motion field from time 0."""
    cx, cy = spec.cx, spec.cy

    def s_of(t):
        return 1 + spec.amplitude * math.sin(2 * math.pi * t / spec.cycle + spec.phase)

    def ds(t):
        return spec.amplitude * 2 * math.pi / spec.cycle * math.cos(2 * math.pi * t / spec.cycle + spec.phase)

    # material points keep rho0; rho(t) = rho0 (1 + w(rho0)(s - 1)), so d rho/dt = rho0 w(rho0) s'(t)
    # expressed as a flow on rho by inverting rho0 from rho numerically each step
    def rhs(t, y):
        rho = y[0]
        lo, hi = 0.0, 3 * spec.r_out
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if mid * (1 + motion_weight(mid, spec.r_out) * (s_of(t) - 1)) < rho:
                lo = mid
            else:
                hi = mid
        rho0 = 0.5 * (lo + hi)
        return [rho0 * motion_weight(rho0, spec.r_out) * ds(t)]

    dx, dy = p0[0] - cx, p0[1] - cy
    rho0 = math.hypot(dx, dy)
    rho_start = rho0 * (1 + motion_weight(rho0, spec.r_out) * (s_of(0) - 1))
    sol = solve_ivp(rhs, (0, t_end), [rho_start], method="RK45", rtol=1e-10, atol=1e-10)
    rho = sol.y[0, -1]
    return cx + dx / rho0 * rho, cy + dy / rho0 * rho


def test_point_on_outer_radius_matches_closed_form_and_flow():
    spec = PhantomSpec(amplitude=0.1, phase=0.0, cycle=8)
    p0 = np.array([spec.cx + spec.r_out, spec.cy])
    p, inside = deform_point(p0, 2, spec)
    assert inside
    assert p[0] - spec.cx == pytest.approx(1.1 * spec.r_out, abs=1e-9)
    assert p[1] == pytest.approx(spec.cy, abs=1e-12)
    fx, fy = _dense_flow_position(p0, 2, spec)
    assert fx == pytest.approx(p[0], abs=1e-6) and fy == pytest.approx(p[1], abs=1e-6)


@pytest.mark.parametrize("rho_frac,angle,t", [(0.5, 0.3, 3), (1.2, 2.0, 5), (1.4, -1.0, 7)])
def test_taper_region_matches_flow(rho_frac, angle, t):
    spec = PhantomSpec(amplitude=0.1, phase=0.4)
    r = rho_frac * spec.r_out
    p0 = np.array([spec.cx + r * math.cos(angle), spec.cy + r * math.sin(angle)])
    p, _ = deform_point(p0, t, spec)
    # the generator's frame 0 is already at s(0); shift by the initial offset
    p_start, _ = deform_point(p0, 0, spec)
    fx, fy = _dense_flow_position(p0, t, spec)
    f0x, f0y = _dense_flow_position(p0, 0, spec)
    assert np.allclose(p - p_start, [fx - f0x, fy - f0y], atol=1e-6)


def test_static_clip():
    g = generate_clip(PhantomSpec(amplitude=0.0, seed=3), 20)
    assert all(np.array_equal(g.clip.frames[0], f) for f in g.clip.frames)
    assert all(np.array_equal(g.masks[0], m) for m in g.masks)
    assert np.all(g.tracks.positions == g.tracks.positions[:, :1])
    assert np.all(g.tracks.visibility == 1)


def test_shadow_sets_visibility_exactly_on_active_frames():
    shadow = ShadowSector(-0.4, 0.4, onset=3, duration=3)
    spec = PhantomSpec(shadow=shadow, seed=5)
    g = generate_clip(spec, 48)
    theta = np.arctan2(g.tracks.positions[:, 0, 1] - spec.cy, g.tracks.positions[:, 0, 0] - spec.cx)
    covered = shadow.covers_angle(theta)
    assert covered.any()
    for i in np.flatnonzero(covered):
        assert g.tracks.visibility[i].tolist() == [1, 1, 1, 0, 0, 0, 1, 1]
    assert np.all(g.tracks.visibility[~covered] == 1)
    # shadowed pixels are black while the sector is active
    assert g.clip.frames[4][int(spec.cy), int(spec.cx + spec.r_out)] == 0.0
    assert g.clip.frames[1][int(spec.cy), int(spec.cx + spec.r_out)] > 0.0


def test_default_area_ratio():
    spec = PhantomSpec()
    areas = generate_clip(spec, 4).masks.reshape(spec.frames, -1).sum(1)
    s = radial_scale(np.arange(spec.frames), spec)
    analytic = (s.max() / s.min()) ** 2
    ratio = areas.max() / areas.min()
    assert 1.10 <= ratio <= 1.45
    assert 1.10 <= analytic <= 1.45
    assert ratio == pytest.approx(analytic, rel=0.03)


def test_determinism_bit_identical():
    spec = PhantomSpec(seed=11, shadow=ShadowSector(0.0, 0.5, 2, 2))
    a, b = generate_clip(spec, 30), generate_clip(spec, 30)
    assert a.clip.frames.tobytes() == b.clip.frames.tobytes()
    assert a.tracks.positions.tobytes() == b.tracks.positions.tobytes()
    c = generate_clip(PhantomSpec(seed=12), 30)
    assert a.clip.frames.tobytes() != c.clip.frames.tobytes()


@pytest.mark.parametrize("kw,needle", [
    (dict(r_in=25, r_out=20), "r_in0 < r_out0"),
    (dict(amplitude=0.5), "a < 0.5"),
    (dict(cycle=1), "T_cycle >= 2"),
    (dict(frames=1), "T >= 2"),
    (dict(r_out=31, r_in=10), "min(H,W)/2"),
])
def test_invalid_spec_names_constraint(kw, needle):
    with pytest.raises(ConfigError, match=None) as exc:
        generate_clip(PhantomSpec(**kw), 4)
    assert needle in str(exc.value)


def test_n_points_must_be_positive():
    with pytest.raises(InputError):
        generate_clip(PhantomSpec(), 0)


def test_seeding_split_and_band():
    spec = PhantomSpec(amplitude=0.0)
    g = generate_clip(spec, 50)
    pts = g.tracks.positions[:, 0]
    rho = np.hypot(pts[:, 0] - spec.cx, pts[:, 1] - spec.cy)
    assert len(pts) == 50
    assert np.all((rho >= spec.r_in - 1e-6) & (rho <= spec.r_out + 1e-6))


specs = st.builds(
    lambda seed, amp, spk, shadow: random_spec(rng_for([seed, 1]), DatasetConfig(
        amplitude_range=(amp, amp + 1e-6), speckle_range=(spk, spk + 1e-6), shadow_prob=shadow), seed),
    st.integers(0, 10 ** 6), st.floats(0.0, 0.12), st.floats(0.0, 0.7), st.sampled_from([0.0, 1.0]))


@settings(max_examples=25, deadline=None)
@given(specs)
def test_generated_clip_invariants(spec):
    g = generate_clip(spec, 24)
    f = g.clip.frames
    assert f.dtype == np.float32 and np.isfinite(f).all() and f.min() >= 0 and f.max() <= 1
    # interior visible points stay inside the mask
    pos, vis = g.tracks.positions.astype(np.float64), g.tracks.visibility
    rho0 = np.hypot(pos[:, 0, 0] - spec.cx, pos[:, 0, 1] - spec.cy)
    s0 = radial_scale(0, spec)
    margin = spec.blur_sigma + 1
    interior = (rho0 >= spec.r_in * s0 + margin) & (rho0 <= spec.r_out * s0 - margin)
    for t in range(spec.frames):
        vals = bilinear_sample(np.asarray(g.masks[t], dtype=np.float64)[None],
                               np.asarray(pos[:, t])[None]).numpy()[0]
        sel = interior & (vis[:, t] == 1)
        assert np.all(vals[sel] == 1.0)
    # smooth area change with factor-2 slack
    area = g.masks.reshape(spec.frames, -1).sum(1).astype(float)
    bound = 2 * 4 * spec.amplitude / spec.cycle * math.pi
    assert np.all(np.abs(np.diff(area)) / area[:-1] <= bound + 1e-12)
    # per-frame displacement bound
    step = np.linalg.norm(np.diff(pos, axis=1), axis=-1)
    assert np.all(step <= spec.r_out * (1 + spec.amplitude) * 2 * math.pi * spec.amplitude / spec.cycle + 1)


def test_generate_records_splits_and_ids():
    cfg = DatasetConfig(n_train=6, n_val=1, n_test=3)
    recs, splits = generate_records(cfg, 7)
    assert len(recs) == 10
    assert [len(splits[k]) for k in ("train", "val", "test")] == [6, 1, 3]
    assert {r.split for r in recs} == {"train", "val", "test"}
    recs2, _ = generate_records(cfg, 7)
    assert all(a.clip.frames.tobytes() == b.clip.frames.tobytes() for a, b in zip(recs, recs2))
    static, _ = generate_records(cfg, 7, count=2, static=True)
    assert all(np.all(r.tracks.positions == r.tracks.positions[:, :1]) for r in static)
