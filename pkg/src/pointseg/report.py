"""Metric aggregation and table rendering (JSON, fixed-width text, TSV)."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import QUALITY_TAGS
from .metrics import paired_t_test

QUALITY_LABELS = {"good_medium": "Good/Medium Quality", "poor": "Poor Quality"}


def mean_std(values, digits: int = 1) -> str:
    """Format as ``85.8(5.4)``; sample standard deviation, 0 for a single value."""
    vals = [v for v in values if v is not None and np.isfinite(v)]
    if not vals:
        return "-"
    sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return f"{np.mean(vals):.{digits}f}({sd:.{digits}f})"


def format_p(p: Optional[float]) -> str:
    if p is None or not np.isfinite(p):
        return "-"
    return "p<0.05" if p < 0.05 else "p>=0.05"


@dataclass
class MetricsReport:
    method: str
    clips: list  # per-clip metric dicts with clip_id and quality
    config: dict = field(default_factory=dict)

    def _values(self, key, quality=None):
        return [c[key] for c in self.clips if quality is None or c["quality"] == quality]

    def aggregate(self) -> dict:
        out = {}
        strata = {"all": None, **{q: q for q in QUALITY_TAGS}}
        keys = [k for k in ("mDice", "HD95", "stability", "AJ", "delta_avg", "OA") if self.clips and k in self.clips[0]]
        for name, q in strata.items():
            block = {"n_clips": len(self._values("clip_id", q))}
            for k in keys:
                vals = [v for v in self._values(k, q) if v is not None and np.isfinite(v)]
                block[k] = {"mean": float(np.mean(vals)) if vals else None,
                            "std": float(np.std(vals, ddof=1)) if len(vals) > 1 else (0.0 if vals else None),
                            "n": len(vals), "missing": len(self._values(k, q)) - len(vals),
                            "formatted": mean_std(vals, 3 if k in ("AJ", "delta_avg", "OA", "stability") else 1)}
            out[name] = block
        return out

    def to_json(self) -> dict:
        clips = [{k: v for k, v in c.items() if k != "pred_masks"} for c in self.clips]
        return {"method": self.method, "aggregate": self.aggregate(), "clips": _clean(clips), "config": self.config}


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _paired(a: MetricsReport, b: MetricsReport, key: str, quality: str):
    da = {c["clip_id"]: c[key] for c in a.clips if c["quality"] == quality}
    db = {c["clip_id"]: c[key] for c in b.clips if c["quality"] == quality}
    ids = [i for i in da if i in db and np.isfinite(da[i]) and np.isfinite(db[i])]
    if len(ids) < 2:
        return None
    return paired_t_test([da[i] for i in ids], [db[i] for i in ids]).pvalue


def segmentation_table(reports: list) -> dict:
    """Rows per method with quality-stratified mDice/HD95, plus a p-value row.

    The p-value row compares the last report with the best other method per
    column (highest mDice, lowest HD95).
    """
    header = ["Method"]
    for q in QUALITY_TAGS:
        header += [f"{QUALITY_LABELS[q]} mDice", f"{QUALITY_LABELS[q]} HD95"]
    rows = []
    for rep in reports:
        row = [rep.method]
        for q in QUALITY_TAGS:
            row += [mean_std(rep._values("mDice", q)), mean_std(rep._values("HD95", q))]
        rows.append(row)
    p_row = ["p-value"]
    ours, others = reports[-1], reports[:-1]
    for q in QUALITY_TAGS:
        for key, better in (("mDice", max), ("HD95", min)):
            cands = [(np.nanmean(r._values(key, q)), r) for r in others if r._values(key, q)]
            cands = [c for c in cands if np.isfinite(c[0])]
            if not cands:
                p_row.append("-")
                continue
            best = better(cands, key=lambda c: c[0])[1]
            p_row.append(format_p(_paired(ours, best, key, q)))
    return {"header": header, "rows": rows, "p_values": p_row}


def ablation_table(results: list) -> dict:
    from .segmenter import ABLATION_COLUMNS

    header = list(ABLATION_COLUMNS) + ["mDice", "HD95", "p-value", "config"]
    rows = []
    for r in results:
        marks = ["x" if r["toggles"][c] else "-" for c in ABLATION_COLUMNS]
        p = "-" if r.get("reference") else format_p(r.get("p_value"))
        rows.append(marks + [f"{r['mDice']:.2f}", f"{r['HD95']:.2f}", p, r["config_hash"]])
    return {"header": header, "rows": rows, "p_values": None}


def render_text(table: dict) -> str:
    rows = [table["header"]] + table["rows"] + ([table["p_values"]] if table.get("p_values") else [])
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(table["header"]))]
    sep = "-+-".join("-" * w for w in widths)
    lines = [" | ".join(str(c).ljust(w) for c, w in zip(table["header"], widths)), sep]
    lines += [" | ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in table["rows"]]
    if table.get("p_values"):
        lines += [sep, " | ".join(str(c).ljust(w) for c, w in zip(table["p_values"], widths))]
    return "\n".join(lines) + "\n"


def render_tsv(table: dict) -> str:
    rows = [table["header"]] + table["rows"] + ([table["p_values"]] if table.get("p_values") else [])
    return "".join("\t".join(str(c) for c in r) + "\n" for r in rows)


def write_tables(table: dict, out_dir, stem: str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.txt").write_text(render_text(table))
    (out_dir / f"{stem}.tsv").write_text(render_tsv(table))


def write_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True))
