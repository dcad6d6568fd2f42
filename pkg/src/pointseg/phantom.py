"""Procedural ultrasound-like phantom with exact masks and point tracks.

A bright annulus (the "myocardium") around a dark cavity pulsates radially.
The same analytic radial map drives the rendered texture, the masks and the
trajectories, so ground truth is exact by construction.

All randomness comes from numpy's Philox counter-based generator seeded with
``PhantomSpec.seed``; a (spec, seed) pair always renders the same bytes.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from .data import ClipRecord, TrajectorySet, VideoClip, make_splits, worker_count, write_dataset
from .errors import ConfigError, InputError

CAVITY_LEVEL = 0.12
TISSUE_LEVEL = 0.75
BACKGROUND_LEVEL = 0.35
TAPER_FACTOR = 1.5  # motion weight reaches zero at TAPER_FACTOR * r_out
POOR_SPECKLE = 0.5  # speckle scale above which a clip is tagged poor


def rng_for(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class ShadowSector:
    start_angle: float  # radians, image convention (y down)
    end_angle: float
    onset: int
    duration: int

    def covers_angle(self, theta):
        span = (self.end_angle - self.start_angle) % (2 * math.pi)
        return (np.asarray(theta) - self.start_angle) % (2 * math.pi) <= span

    def active(self, t: int) -> bool:
        return self.onset <= t < self.onset + self.duration


@dataclass(frozen=True)
class PhantomSpec:
    height: int = 64
    width: int = 64
    frames: int = 8
    cx: float = 31.5
    cy: float = 31.5
    r_in: float = 12.0
    r_out: float = 20.0
    amplitude: float = 0.08
    cycle: float = 8.0
    phase: float = 0.0
    speckle: float = 0.35
    blur_sigma: float = 0.7
    shadow: Optional[ShadowSector] = None
    spacing: float = 0.5
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        if d.get("shadow") is not None:
            d["shadow"] = ShadowSector(**d["shadow"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown phantom keys {sorted(unknown)}; valid keys: {sorted(cls.__dataclass_fields__)}")
        return cls(**d)

    def validate(self) -> None:
        H, W = self.height, self.width
        if self.frames < 2:
            raise ConfigError(f"frames T >= 2 violated (T={self.frames})")
        if self.cycle < 2:
            raise ConfigError(f"cycle length T_cycle >= 2 violated (T_cycle={self.cycle})")
        if not 0 <= self.amplitude < 0.5:
            raise ConfigError(f"0 <= a < 0.5 violated (a={self.amplitude})")
        if not 0 < self.r_in < self.r_out:
            raise ConfigError(f"0 < r_in0 < r_out0 violated (r_in0={self.r_in}, r_out0={self.r_out})")
        limit = min(H, W) / 2 - self.amplitude * self.r_out
        if not self.r_out < limit:
            raise ConfigError(f"r_out0 < min(H,W)/2 - a*r_out0 violated ({self.r_out} >= {limit})")
        reach = self.r_out * (1 + self.amplitude)
        room = min(self.cx, W - 1 - self.cx, self.cy, H - 1 - self.cy)
        if reach > room:
            raise ConfigError(f"annulus must stay inside the frame: r_out0*(1+a)={reach:.3f} > {room:.3f}")
        if self.speckle < 0 or self.blur_sigma < 0 or self.spacing <= 0:
            raise ConfigError("speckle scale and blur sigma must be >= 0, pixel spacing > 0")
        if self.amplitude > 0:
            # the radial map must stay monotone for the texture warp to be invertible
            g_slope = _taper_slope_extremes(self.r_out)
            for s in (1 - self.amplitude, 1 + self.amplitude):
                if 1 + (s - 1) * g_slope[0] <= 0 or 1 + (s - 1) * g_slope[1] <= 0:
                    raise ConfigError(f"radial deformation not invertible for a={self.amplitude}")
        if self.shadow is not None and (self.shadow.duration < 0 or self.shadow.onset < 0):
            raise ConfigError("shadow onset and duration must be >= 0")


def radial_scale(t, spec: PhantomSpec):
    """Pulsation factor ``1 + a sin(2 pi t / T_cycle + phase)``."""
    return 1.0 + spec.amplitude * np.sin(2 * np.pi * np.asarray(t, dtype=np.float64) / spec.cycle + spec.phase)


def motion_weight(rho0, r_out: float):
    """1 up to ``r_out``, raised-cosine taper to 0 at ``TAPER_FACTOR * r_out``."""
    rho0 = np.asarray(rho0, dtype=np.float64)
    width = (TAPER_FACTOR - 1.0) * r_out
    u = np.clip((rho0 - r_out) / width, 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * u))


def _taper_slope_extremes(r_out: float):
    rho = np.linspace(0, TAPER_FACTOR * r_out * 1.01, 4001)
    g = rho * motion_weight(rho, r_out)
    slope = np.gradient(g, rho)
    return float(slope.min()), float(slope.max())


def radial_map(rho0, s, r_out: float):
    rho0 = np.asarray(rho0, dtype=np.float64)
    return rho0 * (1.0 + motion_weight(rho0, r_out) * (s - 1.0))


def deform_point(p0, t, spec: PhantomSpec):
    """Move points given at t=0 to frame ``t``.

    Returns ``(points, inside)`` where points has the shape of ``p0`` and
    ``inside`` is False wherever the position had to be clamped to the frame.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    s = radial_scale(t, spec)
    dx, dy = p0[..., 0] - spec.cx, p0[..., 1] - spec.cy
    rho0 = np.hypot(dx, dy)
    factor = 1.0 + motion_weight(rho0, spec.r_out) * (s - 1.0)
    x = spec.cx + dx * factor
    y = spec.cy + dy * factor
    xc = np.clip(x, 0, spec.width - 1)
    yc = np.clip(y, 0, spec.height - 1)
    inside = (xc == x) & (yc == y)
    return np.stack([xc, yc], axis=-1), inside


def _inverse_radius(rho, s, r_out):
    """Invert ``radial_map`` for a fixed scale through a dense monotone table."""
    if s == 1.0:
        return np.asarray(rho, dtype=np.float64)
    hi = max(float(np.max(rho)), TAPER_FACTOR * r_out) + 2.0
    table = np.linspace(0.0, hi, int(hi * 200) + 1)
    forward = radial_map(table, s, r_out)
    return np.interp(rho, forward, table)


def _speckle_field(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal((spec.height, spec.width))
    g = ndimage.gaussian_filter(g, 0.8, mode="reflect")
    g = (g - g.mean()) / (g.std() + 1e-12)
    sigma = spec.speckle
    return np.exp(sigma * g - 0.5 * sigma * sigma)


def _band_seed_points(spec: PhantomSpec, n_points: int, rng: np.random.Generator) -> np.ndarray:
    n_grid = int(round(0.6 * n_points))
    n_rand = n_points - n_grid
    pts = []
    if n_grid > 0:
        band_area = math.pi * (spec.r_out ** 2 - spec.r_in ** 2)
        step = math.sqrt(band_area / n_grid)
        while True:
            k = int(math.ceil(spec.r_out / step)) + 1
            offs = np.arange(-k, k + 1) * step
            gx, gy = np.meshgrid(offs, offs)
            rho = np.hypot(gx, gy).ravel()
            keep = (rho >= spec.r_in) & (rho <= spec.r_out)
            cand = np.stack([gx.ravel()[keep], gy.ravel()[keep]], axis=-1)
            if len(cand) >= n_grid:
                break
            step *= 0.9
        sel = np.round(np.linspace(0, len(cand) - 1, n_grid)).astype(int)
        grid = cand[sel] + np.array([spec.cx, spec.cy])
        pts.append(grid)
    if n_rand > 0:
        rho = np.sqrt(rng.uniform(spec.r_in ** 2, spec.r_out ** 2, n_rand))
        theta = rng.uniform(0, 2 * math.pi, n_rand)
        pts.append(np.stack([spec.cx + rho * np.cos(theta), spec.cy + rho * np.sin(theta)], axis=-1))
    return np.concatenate(pts, axis=0)


def quality_tag(spec: PhantomSpec) -> str:
    return "poor" if spec.shadow is not None or spec.speckle > POOR_SPECKLE else "good_medium"


@dataclass
class GroundTruthClip:
    clip: VideoClip
    masks: np.ndarray
    tracks: TrajectorySet
    spec: PhantomSpec
    params: dict = field(default_factory=dict)

    def to_record(self, split: str = "unassigned") -> ClipRecord:
        return ClipRecord(self.clip, masks=self.masks, tracks=self.tracks, split=split,
                          extra={"phantom": _jsonable(self.spec.to_dict())})


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (np.floating, np.integer)):
        return d.item()
    return d


def generate_clip(spec: PhantomSpec, n_points: int = 48, clip_id: Optional[str] = None) -> GroundTruthClip:
    if n_points < 1:
        raise InputError(f"n_points must be >= 1, got {n_points}")
    spec.validate()
    rng = rng_for(spec.seed)
    H, W, T = spec.height, spec.width, spec.frames
    speckle = _speckle_field(spec, rng)
    seeds = _band_seed_points(spec, n_points, rng)

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dx, dy = xx - spec.cx, yy - spec.cy
    rho = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    shadow_pixels = spec.shadow.covers_angle(theta) if spec.shadow is not None else None

    frames = np.empty((T, H, W), dtype=np.float32)
    masks = np.empty((T, H, W), dtype=np.uint8)
    for t in range(T):
        s = float(radial_scale(t, spec))
        rho0 = _inverse_radius(rho, s, spec.r_out)
        base = np.where(rho0 < spec.r_in, CAVITY_LEVEL,
                        np.where(rho0 <= spec.r_out, TISSUE_LEVEL, BACKGROUND_LEVEL))
        src_x = spec.cx + rho0 * cos_t
        src_y = spec.cy + rho0 * sin_t
        tex = ndimage.map_coordinates(speckle, [src_y, src_x], order=1, mode="nearest")
        img = base * tex
        if spec.blur_sigma > 0:
            img = ndimage.gaussian_filter(img, spec.blur_sigma, mode="nearest")
        if spec.shadow is not None and spec.shadow.active(t):
            img = np.where(shadow_pixels, 0.0, img)
        frames[t] = np.clip(img, 0.0, 1.0).astype(np.float32)
        masks[t] = ((rho >= spec.r_in * s) & (rho <= spec.r_out * s)).astype(np.uint8)

    positions = np.empty((len(seeds), T, 2), dtype=np.float64)
    visibility = np.ones((len(seeds), T), dtype=np.uint8)
    point_theta = np.arctan2(seeds[:, 1] - spec.cy, seeds[:, 0] - spec.cx)
    in_shadow = spec.shadow.covers_angle(point_theta) if spec.shadow is not None else None
    for t in range(T):
        pts, inside = deform_point(seeds, t, spec)
        positions[:, t] = pts
        visibility[~inside, t] = 0
        if spec.shadow is not None and spec.shadow.active(t):
            visibility[in_shadow, t] = 0

    cid = clip_id if clip_id is not None else f"phantom-{spec.seed:06d}"
    clip = VideoClip(frames, spacing=spec.spacing, clip_id=cid, quality=quality_tag(spec))
    tracks = TrajectorySet(positions.astype(np.float32), visibility)
    params = {"scales": [float(radial_scale(t, spec)) for t in range(T)]}
    return GroundTruthClip(clip, masks, tracks, spec, params)


# -- randomized datasets ----------------------------------------------------------

@dataclass
class DatasetConfig:
    height: int = 64
    width: int = 64
    frames: int = 8
    n_points: int = 48
    n_train: int = 200
    n_val: int = 24
    n_test: int = 40
    amplitude_range: tuple = (0.05, 0.11)
    speckle_range: tuple = (0.2, 0.6)
    shadow_prob: float = 0.3
    spacing: float = 0.5


def random_spec(rng: np.random.Generator, cfg: DatasetConfig, seed: int) -> PhantomSpec:
    """Draw a valid phantom around the default geometry."""
    size = min(cfg.height, cfg.width)
    r_out = size * rng.uniform(0.27, 0.33)
    r_in = r_out * rng.uniform(0.55, 0.68)
    amp = rng.uniform(*cfg.amplitude_range)
    reach = r_out * (1 + amp) + 1.0
    cx = rng.uniform(reach, cfg.width - 1 - reach) if cfg.width - 1 - 2 * reach > 0 else (cfg.width - 1) / 2
    cy = rng.uniform(reach, cfg.height - 1 - reach) if cfg.height - 1 - 2 * reach > 0 else (cfg.height - 1) / 2
    cx = float(np.clip(cx, cfg.width / 2 - 4, cfg.width / 2 + 3))
    cy = float(np.clip(cy, cfg.height / 2 - 4, cfg.height / 2 + 3))
    cycle = rng.uniform(7.0, 10.0)
    phase = rng.uniform(0, 2 * math.pi)
    speckle = rng.uniform(*cfg.speckle_range)
    blur = rng.uniform(0.5, 0.9)
    shadow = None
    if rng.uniform() < cfg.shadow_prob:
        start = rng.uniform(-math.pi, math.pi)
        width = rng.uniform(0.3, 0.7)
        onset = int(rng.integers(1, max(2, cfg.frames - 2)))
        duration = int(rng.integers(1, cfg.frames - onset + 1))
        shadow = ShadowSector(start, start + width, onset, duration)
    return PhantomSpec(height=cfg.height, width=cfg.width, frames=cfg.frames, cx=cx, cy=cy,
                       r_in=float(r_in), r_out=float(r_out), amplitude=float(amp), cycle=float(cycle),
                       phase=float(phase), speckle=float(speckle), blur_sigma=float(blur), shadow=shadow,
                       spacing=cfg.spacing, seed=int(seed))


def generate_records(cfg: DatasetConfig, seed: int, count: Optional[int] = None, static: bool = False) -> list:
    """Generate ``count`` (default: train+val+test) clips split in the configured proportions.

    Returns ``(records, splits)``.
    """
    total = count if count is not None else cfg.n_train + cfg.n_val + cfg.n_test
    if total < 1:
        raise InputError("dataset must contain at least one clip")
    master = rng_for([seed, 0x5EED])
    clip_seeds = master.integers(0, 2 ** 31 - 1, size=total)
    specs = []
    for i, cs in enumerate(clip_seeds):
        spec = random_spec(rng_for([seed, i]), cfg, int(cs))
        if static:
            spec = replace(spec, amplitude=0.0, shadow=None)
        specs.append(spec)
    ids = [f"clip-{seed:04d}-{i:04d}" for i in range(total)]

    def build(i):
        return generate_clip(specs[i], cfg.n_points, clip_id=ids[i])

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            gts = list(pool.map(build, range(total)))
    else:
        gts = [build(i) for i in range(total)]

    n = cfg.n_train + cfg.n_val + cfg.n_test
    ratios = (cfg.n_train / n, cfg.n_val / n, cfg.n_test / n)
    splits = make_splits(ids, ratios, seed)
    tag = {cid: name for name, members in splits.items() for cid in members}
    return [gt.to_record(tag[gt.clip.clip_id]) for gt in gts], splits


def generate_dataset(root, cfg: DatasetConfig, seed: int, count: Optional[int] = None, static: bool = False):
    records, splits = generate_records(cfg, seed, count, static)
    write_dataset(records, root, splits, info={"generator": "phantom", "seed": seed,
                                               "config": _jsonable(asdict(cfg))})
    return records
