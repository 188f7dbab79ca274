"""Aggregation of per-seed metric files into plot-ready curves."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .envs import normalized_return, read_refs


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def run_task(run_dir) -> str:
    manifest = json.loads((Path(run_dir) / "manifest.json").read_text())
    return manifest["config"]["task"]


def curve_stats(curves: list[dict[int, float]]) -> list[dict]:
    """Mean, min and max across seeds at every step all seeds reported."""
    steps = sorted(set.intersection(*(set(c) for c in curves))) if curves else []
    rows = []
    for s in steps:
        vals = np.array([c[s] for c in curves])
        rows.append({"step": s, "mean": float(vals.mean()), "min": float(vals.min()), "max": float(vals.max()), "n": len(vals)})
    return rows


def aggregate_runs(run_dirs, refs_path=None) -> list[dict]:
    """Per-task normalized-return curves plus an ``aggregate`` curve (mean over tasks).

    Returns are normalized with the stored refs when ``refs_path`` is given,
    otherwise the metric files' own normalized column is used.
    """
    refs = read_refs(refs_path) if refs_path else {}
    by_task: dict[str, list[dict[int, float]]] = {}
    for d in run_dirs:
        task = run_task(d)
        files = sorted(Path(d).glob("seed*.csv"))
        if not files:
            raise FileNotFoundError(f"no metric files in {d}")
        for f in files:
            curve = {}
            for row in read_metrics(f):
                if task in refs:
                    v = normalized_return(row["eval_return_mean"], refs[task])
                else:
                    v = row["eval_return_norm"]
                if not math.isnan(v):
                    curve[int(row["step"])] = v
            by_task.setdefault(task, []).append(curve)
    out = []
    task_means = []
    for task in sorted(by_task):
        rows = curve_stats(by_task[task])
        out.extend({"task": task, **r} for r in rows)
        task_means.append({r["step"]: r["mean"] for r in rows})
    if len(task_means) > 1:
        out.extend({"task": "aggregate", **r} for r in curve_stats(task_means))
    return out
