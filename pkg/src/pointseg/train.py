"""Two-stage training: tracker first, then the segmenter against the frozen tracker.

Also checkpoints (single-file JSON manifest + named little-endian arrays),
evaluation loops, and the fusion-toggle ablation harness.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from safetensors.numpy import load_file, save_file

from .config import Config, from_dict
from .data import ClipRecord, VideoClip, worker_count
from .errors import ConfigError, FormatError, MissingFileError, StageMismatchError
from .losses import mask_loss, temporal_loss
from .metrics import clip_segmentation_metrics, paired_t_test, tap_metrics
from .segmenter import ABLATION_COLUMNS, ABLATION_ROWS, FusionConfig, SegmenterModel
from .tracker import TrackerModel, TrackingLossWeights, seed_points, tracking_loss

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.set_num_threads(worker_count())
    torch.use_deterministic_algorithms(deterministic)


def param_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# -- checkpoints ------------------------------------------------------------------

@dataclass
class Checkpoint:
    stage: str
    params: dict  # name -> np.ndarray
    config: dict
    optimizer: dict = field(default_factory=dict)  # name -> np.ndarray
    optimizer_meta: dict = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    epoch: int = 0
    best_metric: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {f"param/{k}": np.ascontiguousarray(v) for k, v in self.params.items()}
        arrays.update({f"optim/{k}": np.ascontiguousarray(v) for k, v in self.optimizer.items()})
        arrays.update({f"rng/{k}": np.ascontiguousarray(v) for k, v in self.rng.items()})
        manifest = {
            "format_version": CHECKPOINT_VERSION,
            "stage": self.stage,
            "config": self.config,
            "optimizer": self.optimizer_meta,
            "epoch": self.epoch,
            "best_metric": self.best_metric,
            "byte_order": "little",
            "names": sorted(arrays),
            "extra": self.extra,
        }
        save_file(arrays, str(path), metadata={"manifest": json.dumps(manifest, sort_keys=True)})

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"missing checkpoint {path}")
        try:
            from safetensors import safe_open

            with safe_open(str(path), framework="numpy") as fh:
                meta = fh.metadata() or {}
            arrays = load_file(str(path))
            manifest = json.loads(meta["manifest"])
        except (KeyError, ValueError, OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: not a valid checkpoint ({exc})") from exc
        groups: dict = {"param": {}, "optim": {}, "rng": {}}
        for key, arr in arrays.items():
            prefix, name = key.split("/", 1)
            groups[prefix][name] = arr
        return cls(manifest["stage"], groups["param"], manifest["config"], groups["optim"],
                   manifest.get("optimizer", {}), groups["rng"], manifest.get("epoch", 0),
                   manifest.get("best_metric"), manifest.get("extra", {}))

    def resolved_config(self) -> Config:
        return from_dict(self.config)

    def load_into(self, module: torch.nn.Module, prefix: str = "") -> None:
        state = module.state_dict()
        missing = [k for k in state if prefix + k not in self.params]
        if missing:
            raise FormatError(f"checkpoint lacks parameters {missing[:5]}")
        new = {k: torch.from_numpy(np.array(self.params[prefix + k])).to(state[k].dtype) for k in state}
        module.load_state_dict(new)


def _state_arrays(module: torch.nn.Module, prefix: str = "") -> dict:
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def _optimizer_arrays(named_params, optimizer) -> tuple:
    arrays, steps = {}, {}
    for name, p in named_params:
        st = optimizer.state.get(p)
        if not st:
            continue
        for key in ("exp_avg", "exp_avg_sq"):
            arrays[f"{name}/{key}"] = st[key].detach().cpu().numpy().copy()
        steps[name] = float(st["step"])
    meta = {"type": "AdamW", "steps": steps,
            "hyper": {k: v for k, v in optimizer.param_groups[0].items() if k != "params" and _jsonable(v)}}
    return arrays, meta


def _jsonable(v) -> bool:
    try:
        json.dumps(v)
        return True
    except TypeError:
        return False


def _restore_optimizer(named_params, optimizer, ckpt: Checkpoint) -> None:
    steps = ckpt.optimizer_meta.get("steps", {})
    for name, p in named_params:
        if name not in steps:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(steps[name]),
            "exp_avg": torch.from_numpy(np.array(ckpt.optimizer[f"{name}/exp_avg"])).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(np.array(ckpt.optimizer[f"{name}/exp_avg_sq"])).to(p.dtype),
        }


# -- batching ---------------------------------------------------------------------

def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.Generator(np.random.Philox([seed, epoch])).permutation(n)


def micro_batches(order: Sequence[int], batch_size: int) -> list:
    return [list(order[i:i + batch_size]) for i in range(0, len(order), batch_size)]


def step_groups(batches: list, accumulation: int) -> list:
    """Group micro-batches into optimizer steps; a trailing partial group still steps."""
    return [batches[i:i + accumulation] for i in range(0, len(batches), accumulation)]


def window_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox([seed, epoch, 1]))


def _window(record: ClipRecord, length: int, rng: np.random.Generator) -> slice:
    T = record.clip.shape[0]
    if T <= length:
        return slice(0, T)
    start = int(rng.integers(0, T - length + 1))
    return slice(start, start + length)


def _cropped(record: ClipRecord, w: slice) -> ClipRecord:
    clip = record.clip
    return ClipRecord(VideoClip(clip.frames[w], clip.spacing, clip.clip_id, clip.quality))


def stack_frames(records, windows, dtype=torch.float32) -> torch.Tensor:
    return torch.stack([torch.from_numpy(r.clip.frames[w]) for r, w in zip(records, windows)]).to(dtype)


def accumulate_gradients(loss_fn: Callable, group: list) -> float:
    """Backpropagate the mean loss of ``group`` micro-batches; returns that mean."""
    total = 0.0
    for batch in group:
        loss = loss_fn(batch) / len(group)
        loss.backward()
        total += float(loss.detach())
    return total


def _make_optimizer(params, cfg: Config):
    return torch.optim.AdamW(params, lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)


def _make_scheduler(optimizer, cfg: Config, steps_per_epoch: int):
    if cfg.train.schedule == "cosine":
        total = max(1, steps_per_epoch * max(cfg.train.epochs, 1))
        return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, total) / total)))
    return None


def _float(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


@dataclass
class TrainResult:
    checkpoint: Checkpoint  # best by validation metric
    last: Checkpoint
    log: list
    model: torch.nn.Module
    tracker: Optional[torch.nn.Module] = None
    seconds: float = 0.0


def _write_log(out_dir, rows):
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "train_log.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


# -- stage 1 ----------------------------------------------------------------------

def build_tracker(cfg: Config) -> TrackerModel:
    return TrackerModel(copy.deepcopy(cfg.encoder), copy.deepcopy(cfg.tracker))


def tracking_weights(cfg: Config) -> TrackingLossWeights:
    return TrackingLossWeights(cfg.losses.visibility, tuple(cfg.losses.track_layers), cfg.losses.include_occluded)


@torch.no_grad()
def predict_tracks(tracker: TrackerModel, record: ClipRecord, points=None):
    """Run the tracker from frame-0 query points (ground-truth seeds by default)."""
    tracker.eval()
    dtype = next(tracker.parameters()).dtype
    if points is None:
        if record.tracks is None:
            raise ConfigError(f"clip {record.clip.clip_id} has no tracks to seed from")
        points = record.tracks.positions[:, 0]
    frames = torch.from_numpy(record.clip.frames)[None].to(dtype)
    pts = torch.as_tensor(np.asarray(points), dtype=dtype)[None]
    return tracker(frames, pts)


def evaluate_tracker(tracker: TrackerModel, records, thresholds) -> list:
    rows = []
    thr = tracker.cfg.visibility_threshold
    for rec in records:
        out = predict_tracks(tracker, rec)
        pos = out.positions[0].numpy()
        vis = out.visibility[0].numpy() > thr
        m = tap_metrics(pos, vis, rec.tracks.positions, rec.tracks.visibility, thresholds)
        m.update(clip_id=rec.clip.clip_id, quality=rec.clip.quality)
        rows.append(m)
    return rows


def _mean_metrics(rows, keys) -> dict:
    return {k: float(np.mean([r[k] for r in rows])) if rows else float("nan") for k in keys}


def train_tracker(train_records, val_records, cfg: Config, out_dir=None, resume: Optional[Checkpoint] = None,
                  dtype=torch.float32) -> TrainResult:
    cfg.validate()
    if cfg.train.stage != "tracker":
        cfg = copy.deepcopy(cfg)
        cfg.train.stage = "tracker"
    records = list(train_records)
    if cfg.train.max_train_clips is not None:
        records = records[: cfg.train.max_train_clips]
    if not records:
        raise ConfigError("tracker training needs at least one clip")
    missing = [r.clip.clip_id for r in records + list(val_records) if r.tracks is None]
    if missing:
        raise ConfigError(f"tracker training requires tracks and visibility; clips without tracks: {missing[:5]}")
    tc = cfg.train
    set_determinism(tc.seed, tc.deterministic)
    model = build_tracker(cfg).to(dtype)
    named = list(model.named_parameters())
    optimizer = _make_optimizer([p for _, p in named], cfg)
    n_batches = math.ceil(len(records) / tc.batch_size)
    scheduler = _make_scheduler(optimizer, cfg, math.ceil(n_batches / tc.accumulation))
    weights = tracking_weights(cfg)
    thresholds = cfg.metrics.thresholds
    rows: list = []
    start_epoch = 0
    best = None
    best_state = None
    stale = 0
    if resume is not None:
        if resume.stage != "tracker":
            raise StageMismatchError(f"cannot resume tracker training from a {resume.stage!r} checkpoint")
        resume.load_into(model)
        _restore_optimizer(named, optimizer, resume)
        start_epoch = resume.epoch
        best = resume.best_metric
        rows = list(resume.extra.get("log", []))
        stale = int(resume.extra.get("stale", 0))
        best_state = _state_arrays(model)

    def loss_fn(batch):
        recs = [records[i] for i in batch]
        wins = [_window(r, tc.clip_frames, loss_fn.rng) for r in recs]
        frames = stack_frames(recs, wins, dtype)
        gt = torch.stack([torch.from_numpy(r.tracks.positions[:, w]) for r, w in zip(recs, wins)]).to(dtype)
        vis = torch.stack([torch.from_numpy(r.tracks.visibility[:, w]) for r, w in zip(recs, wins)]).to(dtype)
        out = model(frames, gt[:, :, 0])
        total, comps = tracking_loss(out, gt, vis, weights)
        loss_fn.components.append({"visibility_ce": _float(comps["visibility_ce"]),
                                   "position_l1": [float(v) for v in comps["position_l1"].detach()]})
        return total

    t0 = time.perf_counter()
    last_ckpt = None
    for epoch in range(start_epoch, tc.epochs):
        model.train()
        order = epoch_order(len(records), tc.seed, epoch)
        batches = micro_batches(order, tc.batch_size)
        groups = step_groups(batches, tc.accumulation)
        losses = []
        loss_fn.components = []
        loss_fn.rng = window_rng(tc.seed, epoch)
        for group in groups:
            optimizer.zero_grad(set_to_none=True)
            losses.append(accumulate_gradients(loss_fn, group))
            if tc.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
            optimizer.step()
            if scheduler is not None:
                scheduler.step()
        val_rows = evaluate_tracker(model, val_records, thresholds) if val_records else []
        val = _mean_metrics(val_rows, ("AJ", "delta_avg", "OA"))
        comps = loss_fn.components
        row = {
            "stage": "tracker",
            "epoch": epoch + 1,
            "micro_steps": len(batches),
            "optimizer_steps": len(groups),
            "train_loss": float(np.mean(losses)),
            "visibility_ce": float(np.mean([c["visibility_ce"] for c in comps])),
            "position_l1": [float(v) for v in np.mean([c["position_l1"] for c in comps], axis=0)],
            "val": val,
        }
        metric = val["delta_avg"] if val_rows else -row["train_loss"]
        if best is None or metric > best + tc.min_delta:
            best, stale = metric, 0
            best_state = _state_arrays(model)
        else:
            stale += 1
        rows.append(row)
        log.info("tracker epoch %d loss %.4f val %s", epoch + 1, row["train_loss"], val)
        opt_arrays, opt_meta = _optimizer_arrays(named, optimizer)
        last_ckpt = Checkpoint("tracker", _state_arrays(model), cfg.to_dict(), opt_arrays, opt_meta,
                               {"torch": torch.get_rng_state().numpy()}, epoch + 1, best,
                               {"log": rows, "stale": stale})
        if out_dir is not None and ((epoch + 1) % max(tc.checkpoint_every, 1) == 0 or epoch + 1 == tc.epochs):
            last_ckpt.save(Path(out_dir) / "last.safetensors")
        if val_rows and stale >= tc.patience:
            break
    seconds = time.perf_counter() - t0
    if last_ckpt is None:
        opt_arrays, opt_meta = _optimizer_arrays(named, optimizer)
        last_ckpt = Checkpoint("tracker", _state_arrays(model), cfg.to_dict(), opt_arrays, opt_meta,
                               {}, start_epoch, best, {"log": rows})
    best_ckpt = Checkpoint("tracker", best_state if best_state is not None else _state_arrays(model),
                           cfg.to_dict(), epoch=last_ckpt.epoch, best_metric=best,
                           extra={"log": rows, "selection": "val delta_avg"})
    best_ckpt.load_into(model)
    if out_dir is not None:
        best_ckpt.save(Path(out_dir) / "tracker.safetensors")
        last_ckpt.save(Path(out_dir) / "last.safetensors")
        _write_log(out_dir, rows)
        (Path(out_dir) / "timing.json").write_text(json.dumps({"seconds": seconds}))
    return TrainResult(best_ckpt, last_ckpt, rows, model, seconds=seconds)


def load_tracker(ckpt: Checkpoint, dtype=torch.float32) -> TrackerModel:
    if ckpt.stage not in ("tracker", "segmenter"):
        raise StageMismatchError(f"unknown checkpoint stage {ckpt.stage!r}")
    cfg = ckpt.resolved_config()
    if ckpt.stage == "segmenter":
        tcfg = from_dict(ckpt.extra["tracker_config"])
        model = build_tracker(tcfg).to(dtype)
        ckpt.load_into(model, prefix="tracker.")
    else:
        model = build_tracker(cfg).to(dtype)
        ckpt.load_into(model)
    model.eval()
    return model


# -- stage 2 ----------------------------------------------------------------------

def build_segmenter(cfg: Config, tracker: Optional[TrackerModel] = None) -> SegmenterModel:
    point_dim = tracker.token_dim if tracker is not None else cfg.encoder.dim
    return SegmenterModel(copy.deepcopy(cfg.encoder), copy.deepcopy(cfg.fusion), point_dim)


@torch.no_grad()
def grid_tracks(tracker: TrackerModel, record: ClipRecord, cfg: Config):
    """Track the seeded grid (plus manual points) through a clip -> (positions, visible, tokens)."""
    T, H, W = record.clip.shape
    pts = seed_points(cfg.tracker, H, W)
    out = predict_tracks(tracker, record, pts)
    vis = (out.visibility > tracker.cfg.visibility_threshold).to(out.positions.dtype)
    return out.positions[0], vis[0], out.point_tokens[0]


def predict_masks(segmenter: SegmenterModel, tracker: Optional[TrackerModel], record: ClipRecord, cfg: Config,
                  cached=None):
    """Final-layer mask probabilities (T, K, H, W) plus the tracks used."""
    segmenter.eval()
    dtype = next(segmenter.parameters()).dtype
    frames = torch.from_numpy(record.clip.frames)[None].to(dtype)
    tracks = cached if cached is not None else (grid_tracks(tracker, record, cfg) if tracker is not None else None)
    with torch.no_grad():
        if segmenter.cfg.use_points:
            pos, vis, tok = tracks
            stack = segmenter(frames, tok[None].to(dtype), pos[None].to(dtype))
        else:
            stack = segmenter(frames)
    return stack.final()[0].numpy(), tracks


def evaluate_segmenter(segmenter, tracker, records, cfg: Config, cache=None, keep_masks: bool = False) -> list:
    rows = []
    for rec in records:
        cached = cache.get(rec.clip.clip_id) if cache else None
        probs, _ = predict_masks(segmenter, tracker, rec, cfg, cached)
        pred = probs[:, 0] > 0.5
        m = clip_segmentation_metrics(pred, rec.masks, rec.clip.spacing, rec.annotation_mask())
        m.update(clip_id=rec.clip.clip_id, quality=rec.clip.quality)
        m["HD95_px"] = m["HD95"] / rec.clip.spacing
        if keep_masks:
            m["pred_masks"] = pred
        rows.append(m)
    return rows


def train_segmenter(train_records, val_records, tracker_ckpt: Checkpoint, cfg: Config, out_dir=None,
                    dtype=torch.float32, resume: Optional[Checkpoint] = None) -> TrainResult:
    cfg.validate()
    if tracker_ckpt.stage != "tracker":
        raise StageMismatchError(f"segmenter training needs a 'tracker' checkpoint, got {tracker_ckpt.stage!r}")
    if cfg.train.stage != "segmenter":
        cfg = copy.deepcopy(cfg)
        cfg.train.stage = "segmenter"
    records = list(train_records)
    if cfg.train.max_train_clips is not None:
        records = records[: cfg.train.max_train_clips]
    if not records:
        raise ConfigError("segmenter training needs at least one clip")
    missing = [r.clip.clip_id for r in records if r.masks is None]
    if missing:
        raise ConfigError(f"segmenter training requires masks; clips without masks: {missing[:5]}")
    tc = cfg.train
    set_determinism(tc.seed, tc.deterministic)
    tracker = load_tracker(tracker_ckpt, dtype)
    tracker_cfg = tracker_ckpt.resolved_config()
    joint = tc.joint
    for p in tracker.parameters():
        p.requires_grad_(joint)
    hash_before = param_hash(tracker)

    model = build_segmenter(cfg, tracker).to(dtype)
    if tc.init_encoder_from_tracker and tracker_cfg.encoder == cfg.encoder:
        model.encoder.load_state_dict(tracker.encoder.state_dict())
    named = list(model.named_parameters())
    if joint:
        named += [("tracker." + n, p) for n, p in tracker.named_parameters()]
    optimizer = _make_optimizer([p for _, p in named], cfg)
    n_batches = math.ceil(len(records) / tc.batch_size)
    scheduler = _make_scheduler(optimizer, cfg, math.ceil(n_batches / tc.accumulation))
    weights = cfg.losses

    cache = {}
    if cfg.fusion.use_points or weights.temporal > 0:
        for rec in list(records) + list(val_records):
            if rec.clip.clip_id not in cache:
                cache[rec.clip.clip_id] = grid_tracks(tracker, rec, cfg)

    start_epoch, best, best_state, stale, rows = 0, None, None, 0, []
    if resume is not None:
        if resume.stage != "segmenter":
            raise StageMismatchError(f"cannot resume segmenter training from a {resume.stage!r} checkpoint")
        resume.load_into(model, prefix="segmenter.")
        _restore_optimizer(named, optimizer, resume)
        start_epoch, best = resume.epoch, resume.best_metric
        rows = list(resume.extra.get("log", []))
        stale = int(resume.extra.get("stale", 0))
        best_state = _state_arrays(model)

    def loss_fn(batch):
        recs = [records[i] for i in batch]
        wins = [_window(r, tc.clip_frames, loss_fn.rng) for r in recs]
        frames = stack_frames(recs, wins, dtype)
        gt = torch.stack([torch.from_numpy(r.masks[w]) for r, w in zip(recs, wins)]).to(dtype)
        annotated = torch.from_numpy(np.stack([r.annotation_mask()[w] for r, w in zip(recs, wins)]))
        if joint:
            pts = torch.as_tensor(np.stack([seed_points(cfg.tracker, *r.clip.shape[1:]) for r in recs]), dtype=dtype)
            tout = tracker(frames, pts)
            pos, tok = tout.positions, tout.point_tokens
            vis = (tout.visibility > tracker.cfg.visibility_threshold).to(dtype)
        elif cache:
            # cached tracks start at frame 0, so a later window re-tracks from its own first frame
            tracks = [cache[r.clip.clip_id] if w.start == 0 else grid_tracks(tracker, _cropped(r, w), cfg)
                      for r, w in zip(recs, wins)]
            pos = torch.stack([c[0][:, : w.stop - w.start] for c, w in zip(tracks, wins)])
            vis = torch.stack([c[1][:, : w.stop - w.start] for c, w in zip(tracks, wins)])
            tok = torch.stack([c[2][:, : w.stop - w.start] for c, w in zip(tracks, wins)])
        else:
            pos = vis = tok = None
        if cfg.fusion.use_points:
            stack = model(frames, tok, pos)
        else:
            stack = model(frames)
        probs = stack.probs
        l_mask, per_mask = mask_loss(probs, gt, weights, annotated)
        if weights.temporal > 0 and pos is not None:
            l_temp, per_temp = temporal_loss(probs, pos, vis, weights)
        else:
            l_temp, per_temp = probs.sum() * 0, probs.new_zeros(probs.shape[1])
        loss_fn.components.append({"mask": _float(l_mask), "temporal": _float(l_temp),
                                   "dice_per_layer": [float(v) for v in per_mask.detach()],
                                   "temporal_per_layer": [float(v) for v in per_temp.detach()]})
        return l_mask + l_temp

    t0 = time.perf_counter()
    last_ckpt = None
    for epoch in range(start_epoch, tc.epochs):
        model.train()
        order = epoch_order(len(records), tc.seed, epoch)
        batches = micro_batches(order, tc.batch_size)
        groups = step_groups(batches, tc.accumulation)
        losses = []
        loss_fn.components = []
        loss_fn.rng = window_rng(tc.seed, epoch)
        for group in groups:
            optimizer.zero_grad(set_to_none=True)
            losses.append(accumulate_gradients(loss_fn, group))
            if tc.grad_clip:
                torch.nn.utils.clip_grad_norm_([p for _, p in named], tc.grad_clip)
            optimizer.step()
            if scheduler is not None:
                scheduler.step()
        val_rows = evaluate_segmenter(model, tracker, val_records, cfg, cache) if val_records else []
        val = _mean_metrics(val_rows, ("mDice", "HD95", "stability"))
        comps = loss_fn.components
        row = {
            "stage": "segmenter",
            "epoch": epoch + 1,
            "micro_steps": len(batches),
            "optimizer_steps": len(groups),
            "train_loss": float(np.mean(losses)),
            "mask_loss": float(np.mean([c["mask"] for c in comps])),
            "temporal_loss": float(np.mean([c["temporal"] for c in comps])),
            "dice_per_layer": [float(v) for v in np.mean([c["dice_per_layer"] for c in comps], axis=0)],
            "val": val,
        }
        metric = val["mDice"] if val_rows else -row["train_loss"]
        if best is None or metric > best + tc.min_delta:
            best, stale = metric, 0
            best_state = _state_arrays(model)
        else:
            stale += 1
        rows.append(row)
        log.info("segmenter epoch %d loss %.4f val %s", epoch + 1, row["train_loss"], val)
        opt_arrays, opt_meta = _optimizer_arrays(named, optimizer)
        params = _state_arrays(model, "segmenter.")
        params.update(_state_arrays(tracker, "tracker."))
        last_ckpt = Checkpoint("segmenter", params, cfg.to_dict(), opt_arrays, opt_meta,
                               {"torch": torch.get_rng_state().numpy()}, epoch + 1, best,
                               {"log": rows, "stale": stale, "tracker_config": tracker_cfg.to_dict()})
        if out_dir is not None and ((epoch + 1) % max(tc.checkpoint_every, 1) == 0 or epoch + 1 == tc.epochs):
            last_ckpt.save(Path(out_dir) / "last.safetensors")
        if val_rows and stale >= tc.patience:
            break
    seconds = time.perf_counter() - t0
    hash_after = param_hash(tracker)
    if not joint and hash_after != hash_before:
        raise RuntimeError("frozen tracker parameters changed during segmenter training")
    if best_state is None:
        best_state = _state_arrays(model)
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in best_state.items()})
    params = {f"segmenter.{k}": v for k, v in best_state.items()}
    params.update(_state_arrays(tracker, "tracker."))
    extra = {"log": rows, "selection": "val mDice", "tracker_config": tracker_cfg.to_dict(),
             "tracker_hash_before": hash_before, "tracker_hash_after": hash_after}
    best_ckpt = Checkpoint("segmenter", params, cfg.to_dict(), epoch=len(rows), best_metric=best, extra=extra)
    if last_ckpt is None:
        last_ckpt = best_ckpt
    if out_dir is not None:
        best_ckpt.save(Path(out_dir) / "segmenter.safetensors")
        _write_log(out_dir, rows)
        (Path(out_dir) / "timing.json").write_text(json.dumps({"seconds": seconds}))
    result = TrainResult(best_ckpt, last_ckpt, rows, model, tracker, seconds)
    result.cache = cache
    return result


def load_segmenter(ckpt: Checkpoint, dtype=torch.float32):
    if ckpt.stage != "segmenter":
        raise StageMismatchError(f"expected a 'segmenter' checkpoint, got {ckpt.stage!r}")
    cfg = ckpt.resolved_config()
    tracker = load_tracker(ckpt, dtype)
    model = build_segmenter(cfg, tracker).to(dtype)
    ckpt.load_into(model, prefix="segmenter.")
    model.eval()
    return model, tracker, cfg


# -- ablation ---------------------------------------------------------------------

def run_ablation(train_records, eval_records, tracker_ckpt: Checkpoint, base: Config, out_dir=None) -> list:
    """Train and evaluate the five toggle patterns; rows come back in table order."""
    results = []
    for row in ABLATION_ROWS:
        cfg = copy.deepcopy(base)
        fields = FusionConfig.from_row(row, layers=base.fusion.layers, classes=base.fusion.classes,
                                       heads=base.fusion.heads, decoder_dim=base.fusion.decoder_dim,
                                       ffn_dim=base.fusion.ffn_dim)
        cfg.fusion = fields
        cfg.train.stage = "segmenter"
        sub = None if out_dir is None else Path(out_dir) / ("row-" + "".join("1" if t else "0" for t in row))
        res = train_segmenter(train_records, [], tracker_ckpt, cfg, sub)
        rows = evaluate_segmenter(res.model, res.tracker, eval_records, cfg, getattr(res, "cache", None))
        results.append({
            "toggles": dict(zip(ABLATION_COLUMNS, row)),
            "mDice": float(np.mean([r["mDice"] for r in rows])),
            "HD95": float(np.nanmean([r["HD95"] for r in rows])),
            "per_clip_dice": [r["mDice"] for r in rows],
            "config_hash": cfg.hash(),
            "reference": row == ABLATION_ROWS[-1],
        })
    ref = results[-1]["per_clip_dice"]
    for r in results:
        if r["reference"]:
            r["p_value"] = None
        else:
            r["p_value"] = paired_t_test(r["per_clip_dice"], ref).pvalue
    return results
