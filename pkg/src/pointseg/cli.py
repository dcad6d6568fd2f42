"""Command line: phantom generation, two-stage training, evaluation, inference, ablation.

Errors print one line ``error category=<name> message=<text>`` to stderr and
exit with a category-specific code (see ``errors.py``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .config import Config, load_config
from .data import (ClipRecord, TrajectorySet, load_dataset, load_splits, read_clip, worker_count, write_clip,
                   write_dataset)
from .errors import ConfigError, MissingFileError, PointSegError, StageMismatchError
from .phantom import PhantomSpec, generate_clip, generate_dataset
from .report import MetricsReport, ablation_table, segmentation_table, write_json, write_tables
from .train import (Checkpoint, evaluate_segmenter, evaluate_tracker, grid_tracks, load_segmenter, load_tracker,
                    predict_masks, run_ablation, train_segmenter, train_tracker)

log = logging.getLogger("pointseg")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file (sections: %s)" % ", ".join(Config.__dataclass_fields__))
    p.add_argument("--seed", type=int, default=None, help="seed for all randomness (overrides train.seed)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, repeatable (e.g. train.epochs=5)")
    p.add_argument("--deterministic", action="store_true", help="force deterministic kernels")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a phantom dataset")
    _common(p)
    p.add_argument("--count", type=int, default=None, help="number of clips (default: data.n_train+n_val+n_test)")
    p.add_argument("--spec", help="JSON PhantomSpec; clips then differ only by seed")
    p.add_argument("--static", action="store_true", help="zero motion and no shadows")

    p = sub.add_parser("train", help="train one stage")
    _common(p)
    p.add_argument("--stage", choices=("tracker", "segmenter"), required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--tracker", help="tracker checkpoint (stage segmenter)")

    p = sub.add_parser("eval", help="evaluate checkpoints or predicted masks on a dataset")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", action="append", default=[], help="checkpoint, repeatable; last is 'ours'")
    p.add_argument("--pred", action="append", default=[], help="directory of predicted clips (masks.bin)")
    p.add_argument("--split", default="test", help="split to evaluate ('all' for every clip)")

    p = sub.add_parser("infer", help="predict masks and tracks for one clip")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True, help="clip directory")

    p = sub.add_parser("ablate", help="train/evaluate the five toggle configurations")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--tracker", required=True, help="tracker checkpoint")
    p.add_argument("--split", default="test")
    return parser


def resolve_config(args) -> Config:
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.deterministic:
        overrides.append("train.deterministic=true")
    return load_config(args.config, overrides)


def _records(data, split):
    if split in (None, "all"):
        return load_dataset(data)
    splits = load_splits(data)
    if split not in splits:
        raise ConfigError(f"split {split!r} not found in {data}; available: {sorted(splits)}")
    return splits[split]


def cmd_phantom(args, cfg: Config) -> dict:
    out = Path(args.out)
    seed = cfg.train.seed
    if args.spec:
        path = Path(args.spec)
        if not path.exists():
            raise MissingFileError(f"missing spec file {path}")
        base = PhantomSpec.from_dict(json.loads(path.read_text()))
        count = args.count or 1
        records = []
        for i in range(count):
            spec = PhantomSpec.from_dict({**base.to_dict(), "seed": seed + i})
            records.append(generate_clip(spec, cfg.data.n_points, clip_id=f"clip-{seed:04d}-{i:04d}").to_record("test"))
        write_dataset(records, out, info={"generator": "phantom-spec", "seed": seed, "spec": base.to_dict()})
    else:
        records = generate_dataset(out, cfg.data, seed, args.count, args.static)
    write_json({"config": cfg.to_dict(), "clips": len(records)}, out / "config.json")
    return {"clips": len(records), "out": str(out)}


def cmd_train(args, cfg: Config) -> dict:
    out = Path(args.out)
    splits = load_splits(args.data)
    train = splits.get("train") or []
    val = splits.get("val") or []
    if not train:
        raise ConfigError(f"no training clips in {args.data}")
    cfg.train.stage = args.stage
    if args.stage == "tracker":
        res = train_tracker(train, val, cfg, out)
    else:
        if not args.tracker:
            raise ConfigError("--tracker checkpoint is required for stage segmenter")
        ckpt = Checkpoint.load(args.tracker)
        if ckpt.stage != "tracker":
            raise StageMismatchError(f"{args.tracker} is a {ckpt.stage!r} checkpoint, expected 'tracker'")
        res = train_segmenter(train, val, ckpt, cfg, out)
    write_json(cfg.to_dict(), out / "config.json")
    plotting.training_curves(res.log, out / "figures" / "training_curves.png")
    return {"epochs": len(res.log), "out": str(out)}


def _pred_report(pred_dir, records) -> MetricsReport:
    from .metrics import clip_segmentation_metrics

    preds = {r.clip.clip_id: r for r in load_dataset(pred_dir)}
    rows = []
    for rec in records:
        if rec.clip.clip_id not in preds or preds[rec.clip.clip_id].masks is None:
            raise MissingFileError(f"no predicted masks for clip {rec.clip.clip_id} in {pred_dir}")
        m = clip_segmentation_metrics(preds[rec.clip.clip_id].masks, rec.masks, rec.clip.spacing,
                                      rec.annotation_mask())
        m.update(clip_id=rec.clip.clip_id, quality=rec.clip.quality)
        rows.append(m)
    return MetricsReport(Path(pred_dir).name, rows)


def cmd_eval(args, cfg: Config) -> dict:
    out = Path(args.out)
    records = _records(args.data, args.split)
    if not records:
        raise ConfigError(f"no clips to evaluate in {args.data} (split {args.split})")
    if not args.checkpoint and not args.pred:
        raise ConfigError("give at least one --checkpoint or --pred")
    seg_reports, track_reports = [], []
    for pred in args.pred:
        seg_reports.append(_pred_report(pred, records))
    for path in args.checkpoint:
        ckpt = Checkpoint.load(path)
        name = Path(path).parent.name or Path(path).stem
        if ckpt.stage == "segmenter":
            seg, tracker, ccfg = load_segmenter(ckpt)
            rows = evaluate_segmenter(seg, tracker, records, ccfg)
            seg_reports.append(MetricsReport(name, rows, ckpt.config))
        else:
            tracker = load_tracker(ckpt)
            with_tracks = [r for r in records if r.tracks is not None]
            rows = evaluate_tracker(tracker, with_tracks, cfg.metrics.thresholds)
            track_reports.append(MetricsReport(name, rows, ckpt.config))
    result = {"config": cfg.to_dict(), "segmentation": [r.to_json() for r in seg_reports],
              "tracking": [r.to_json() for r in track_reports]}
    if seg_reports:
        table = segmentation_table(seg_reports)
        write_tables(table, out, "table")
        result["table"] = table
        plotting.metric_by_quality(seg_reports[-1], "mDice", out / "figures" / "mdice_by_quality.png", "mDice")
        plotting.dice_over_time(seg_reports, out / "figures" / "dice_over_time.png")
    if track_reports:
        header = ["Method", "AJ", "<delta_avg", "OA"]
        rows = [[r.method] + [r.aggregate()["all"][k]["formatted"] for k in ("AJ", "delta_avg", "OA")]
                for r in track_reports]
        ttable = {"header": header, "rows": rows, "p_values": None}
        write_tables(ttable, out, "tracking_table")
        result["tracking_table"] = ttable
    write_json(result, out / "report.json")
    return {"out": str(out), "methods": [r.method for r in seg_reports + track_reports]}


def cmd_infer(args, cfg: Config) -> dict:
    out = Path(args.out)
    rec = read_clip(args.clip)
    ckpt = Checkpoint.load(args.checkpoint)
    if ckpt.stage == "segmenter":
        seg, tracker, ccfg = load_segmenter(ckpt)
        probs, (pos, vis, _) = predict_masks(seg, tracker, rec, ccfg)
        pred = (probs[:, 0] > 0.5).astype(np.uint8)
    elif ckpt.stage == "tracker":
        tracker = load_tracker(ckpt)
        pos, vis, _ = grid_tracks(tracker, rec, ckpt.resolved_config())
        pred = None
    else:
        raise StageMismatchError(f"cannot infer with a {ckpt.stage!r} checkpoint")
    tracks = TrajectorySet(pos.numpy(), vis.numpy().astype(np.uint8))
    write_clip(ClipRecord(rec.clip, masks=pred, tracks=tracks, split="prediction"), out)
    if pred is not None:
        for t in range(pred.shape[0]):
            rgb = plotting.overlay_rgb(rec.clip.frames[t], pred[t], None if rec.masks is None else rec.masks[t])
            plotting.save_png(rgb, out / "overlays" / f"frame_{t:03d}.png")
    return {"out": str(out), "frames": rec.clip.shape[0]}


def cmd_ablate(args, cfg: Config) -> dict:
    out = Path(args.out)
    splits = load_splits(args.data)
    ckpt = Checkpoint.load(args.tracker)
    if ckpt.stage != "tracker":
        raise StageMismatchError(f"{args.tracker} is a {ckpt.stage!r} checkpoint, expected 'tracker'")
    eval_records = _records(args.data, args.split)
    results = run_ablation(splits.get("train", []), eval_records, ckpt, cfg, out)
    table = ablation_table(results)
    write_tables(table, out, "ablation")
    write_json({"config": cfg.to_dict(), "rows": results, "table": table}, out / "ablation.json")
    plotting.ablation_bars(results, out / "figures" / "ablation.png")
    return {"out": str(out), "rows": len(results)}


COMMANDS = {"phantom": cmd_phantom, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(worker_count())
    try:
        cfg = resolve_config(args)
        summary = COMMANDS[args.command](args, cfg)
    except PointSegError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error category={exc.category} message={msg}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error category=io message={str(exc).replace(chr(10), ' ')}", file=sys.stderr)
        return 8
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
