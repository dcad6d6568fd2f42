"""Clip containers, the on-disk clip directory format, and dataset splits.

Layout of one clip directory::

    meta.json       dims, spacing, ids, tags, byte order, dtype codes
    frames.bin      float32 little-endian, T x H x W row-major
    masks.bin       uint8 {0,1}, T x H x W (optional)
    tracks.bin      float32 little-endian, N x T x 2, x before y (optional)
    visibility.bin  uint8 {0,1}, N x T (optional)

Coordinates use a top-left origin with x to the right and y downward; the
pixel at row ``i``, column ``j`` sits at ``(x, y) = (j, i)``.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, InputError, MissingFileError

QUALITY_TAGS = ("good_medium", "poor")
FORMAT_VERSION = 1

_FRAMES_DTYPE = np.dtype("<f4")
_MASK_DTYPE = np.dtype("u1")
_TRACK_DTYPE = np.dtype("<f4")


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W) float32 in [0, 1]
    spacing: float = 1.0
    clip_id: str = "clip"
    quality: str = "good_medium"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise FormatError(f"frames must be T x H x W with T >= 1, got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise FormatError(f"clip {self.clip_id}: non-finite intensities")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise FormatError(f"clip {self.clip_id}: intensities outside [0, 1]")
        if self.quality not in QUALITY_TAGS:
            raise FormatError(f"unknown quality tag {self.quality!r}; expected one of {QUALITY_TAGS}")

    @property
    def shape(self):
        return self.frames.shape


@dataclass
class TrajectorySet:
    positions: np.ndarray  # (N, T, 2) float32, x then y
    visibility: np.ndarray  # (N, T) uint8 in {0, 1}
    point_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float32)
        self.visibility = np.asarray(self.visibility, dtype=np.uint8)
        if self.positions.ndim != 3 or self.positions.shape[-1] != 2 or self.positions.shape[0] < 1:
            raise FormatError(f"positions must be N x T x 2 with N >= 1, got {self.positions.shape}")
        if self.visibility.shape != self.positions.shape[:2]:
            raise FormatError(
                f"visibility shape {self.visibility.shape} does not match positions {self.positions.shape[:2]}"
            )
        if not np.all(np.isfinite(self.positions)):
            raise FormatError("non-finite track positions")
        if np.any(self.visibility > 1):
            raise FormatError("visibility values must be 0 or 1")
        if self.point_ids is None:
            self.point_ids = np.arange(self.positions.shape[0], dtype=np.int64)
        self.point_ids = np.asarray(self.point_ids, dtype=np.int64)

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]


@dataclass
class ClipRecord:
    clip: VideoClip
    masks: Optional[np.ndarray] = None  # (T, H, W) uint8
    tracks: Optional[TrajectorySet] = None
    split: str = "unassigned"
    # frames carrying mask annotations; None means every frame
    annotated_frames: Optional[list] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        T, H, W = self.clip.shape
        if self.masks is not None:
            self.masks = np.asarray(self.masks)
            if self.masks.shape != (T, H, W):
                raise FormatError(f"masks shape {self.masks.shape} does not match clip {(T, H, W)}")
            if not np.isin(self.masks, (0, 1)).all():
                raise FormatError(f"clip {self.clip.clip_id}: masks must be binary")
            self.masks = self.masks.astype(np.uint8)
        if self.tracks is not None and self.tracks.positions.shape[1] != T:
            raise FormatError(f"tracks cover {self.tracks.positions.shape[1]} frames, clip has {T}")
        if self.annotated_frames is not None:
            frames = sorted(int(t) for t in self.annotated_frames)
            if any(t < 0 or t >= T for t in frames):
                raise FormatError(f"annotated frame index out of range for T={T}")
            self.annotated_frames = frames

    def annotation_mask(self) -> np.ndarray:
        T = self.clip.shape[0]
        if self.annotated_frames is None:
            return np.ones(T, dtype=bool)
        out = np.zeros(T, dtype=bool)
        out[self.annotated_frames] = True
        return out


def write_clip(record: ClipRecord, directory) -> None:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        T, H, W = record.clip.shape
        meta = {
            "format_version": FORMAT_VERSION,
            "clip_id": record.clip.clip_id,
            "frames": T,
            "height": H,
            "width": W,
            "spacing": float(record.clip.spacing),
            "quality": record.clip.quality,
            "split": record.split,
            "byte_order": "little",
            "dtypes": {"frames": "<f4", "masks": "u1", "tracks": "<f4", "visibility": "u1"},
            "has_masks": record.masks is not None,
            "has_tracks": record.tracks is not None,
            "annotated_frames": record.annotated_frames,
            "extra": record.extra,
        }
        if record.tracks is not None:
            meta["n_points"] = record.tracks.n_points
            meta["point_ids"] = [int(i) for i in record.tracks.point_ids]
        (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        _write_array(directory / "frames.bin", record.clip.frames, _FRAMES_DTYPE)
        if record.masks is not None:
            _write_array(directory / "masks.bin", record.masks, _MASK_DTYPE)
        if record.tracks is not None:
            _write_array(directory / "tracks.bin", record.tracks.positions, _TRACK_DTYPE)
            _write_array(directory / "visibility.bin", record.tracks.visibility, _MASK_DTYPE)
    except OSError as exc:
        raise OSError(f"failed writing clip to {directory}: {exc}") from exc


def _write_array(path: Path, arr: np.ndarray, dtype: np.dtype) -> None:
    data = np.ascontiguousarray(arr, dtype=dtype)
    with open(path, "wb") as fh:
        fh.write(data.tobytes(order="C"))


def _read_array(path: Path, dtype: np.dtype, shape) -> np.ndarray:
    if not path.exists():
        raise MissingFileError(f"missing file {path}")
    expected = int(np.prod(shape)) * dtype.itemsize
    size = path.stat().st_size
    if size != expected:
        raise FormatError(f"{path}: size {size} bytes does not match meta.json (expected {expected})")
    return np.fromfile(path, dtype=dtype).reshape(shape)


def read_clip(directory) -> ClipRecord:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise MissingFileError(f"missing file {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{meta_path}: invalid JSON ({exc})") from exc
    for key in ("frames", "height", "width", "clip_id"):
        if key not in meta:
            raise FormatError(f"{meta_path}: missing key {key!r}")
    if meta.get("byte_order", "little") != "little":
        raise FormatError(f"{meta_path}: unsupported byte order {meta['byte_order']!r}")
    T, H, W = int(meta["frames"]), int(meta["height"]), int(meta["width"])
    frames = _read_array(directory / "frames.bin", _FRAMES_DTYPE, (T, H, W)).astype(np.float32)
    clip = VideoClip(frames, spacing=float(meta.get("spacing", 1.0)), clip_id=str(meta["clip_id"]),
                     quality=meta.get("quality", "good_medium"))
    masks = None
    if meta.get("has_masks", (directory / "masks.bin").exists()):
        masks = _read_array(directory / "masks.bin", _MASK_DTYPE, (T, H, W))
        if masks.size and masks.max() > 1:
            raise FormatError(f"{directory / 'masks.bin'}: non-binary mask values")
    tracks = None
    if meta.get("has_tracks", (directory / "tracks.bin").exists()):
        if "n_points" not in meta:
            raise FormatError(f"{meta_path}: tracks present but n_points missing")
        N = int(meta["n_points"])
        pos = _read_array(directory / "tracks.bin", _TRACK_DTYPE, (N, T, 2)).astype(np.float32)
        vis = _read_array(directory / "visibility.bin", _MASK_DTYPE, (N, T))
        if vis.size and vis.max() > 1:
            raise FormatError(f"{directory / 'visibility.bin'}: non-binary visibility values")
        tracks = TrajectorySet(pos, vis, np.asarray(meta.get("point_ids", np.arange(N))))
    return ClipRecord(clip, masks=masks, tracks=tracks, split=meta.get("split", "unassigned"),
                      annotated_frames=meta.get("annotated_frames"), extra=meta.get("extra", {}))


def make_splits(clip_ids: Sequence[str], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> dict:
    """Deterministically shuffle ``clip_ids`` and cut them into train/val/test.

    Sizes are ``floor(ratio * n)`` for train and val; test takes the rest.
    """
    ids = list(clip_ids)
    if not ids:
        raise InputError("cannot split an empty id list")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise InputError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(ids)
    order = np.random.Generator(np.random.Philox(seed)).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = int(math.floor(ratios[0] * n + 1e-9))
    n_val = min(int(math.floor(ratios[1] * n + 1e-9)), n - n_train)
    return {
        "train": shuffled[:n_train],
        "val": shuffled[n_train:n_train + n_val],
        "test": shuffled[n_train + n_val:],
    }


# -- dataset directories ---------------------------------------------------------

def write_dataset(records: Sequence[ClipRecord], root, splits: Optional[dict] = None, info: Optional[dict] = None):
    """Write clips as ``root/<clip_id>/`` plus an ``index.json`` listing splits."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if splits is None:
        splits = {}
        for rec in records:
            splits.setdefault(rec.split, []).append(rec.clip.clip_id)
    for rec in records:
        write_clip(rec, root / rec.clip.clip_id)
    index = {"format_version": FORMAT_VERSION, "splits": splits, "info": info or {}}
    (root / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))


def list_clip_dirs(root) -> list:
    root = Path(root)
    if not root.exists():
        raise MissingFileError(f"missing data directory {root}")
    if (root / "meta.json").exists():
        return [root]
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "meta.json").exists())


def load_dataset(root, split: Optional[str] = None) -> list:
    """Read every clip under ``root`` (or only those of ``split`` per index.json)."""
    root = Path(root)
    index_path = root / "index.json"
    if split is not None and index_path.exists():
        index = json.loads(index_path.read_text())
        ids = index["splits"].get(split, [])
        return [read_clip(root / cid) for cid in ids]
    records = [read_clip(p) for p in list_clip_dirs(root)]
    if split is not None:
        records = [r for r in records if r.split == split]
    return records


def load_splits(root) -> dict:
    root = Path(root)
    index_path = root / "index.json"
    if index_path.exists():
        index = json.loads(index_path.read_text())
        return {k: [read_clip(root / cid) for cid in v] for k, v in index["splits"].items()}
    out: dict = {}
    for rec in load_dataset(root):
        out.setdefault(rec.split, []).append(rec)
    return out


def worker_count(default: int = 1) -> int:
    value = os.environ.get("POINTSEG_THREADS")
    if not value:
        return default
    try:
        return max(1, int(value))
    except ValueError:
        return default
