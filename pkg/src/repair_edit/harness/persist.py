"""Run directories: manifest, metric records, checkpoints and routing traces.

A run directory written by :func:`write_run` holds::

    manifest.json        config, seed, records, merge / re-trigger / calibration reports
    metrics.jsonl        one MetricsRecord per line
    metrics.csv          the same records as CSV
    timings.json         wall-clock seconds per phase (the only non-reproducible file)
    model.rpt            base model tensors
    state.rpt            merged main matrix, shard matrices and masks, epsilon
    routing_trace.jsonl  optional, one routing decision per evaluated prompt

Everything except ``timings.json`` is byte-identical across runs with the same
config and seed.
"""
from __future__ import annotations

import csv
import json
import os
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from ..sidememory import MAIN, ShardState, route_many
from ..tensorio import load_tensors, save_tensors
from ..toylm import ModelState, load_model, save_model
from .corpus import EditExample
from .loop import MANIFEST_SCHEMA, RunResult
from .metrics import METRICS_SCHEMA, MetricsRecord, final_states

OUT_ENV = "REPAIR_OUT_DIR"
CSV_FIELDS = ("step", "rel", "gen", "loc", "op", "ppl")

PathLike = Union[str, Path]


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "repair_runs"))


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_metrics(out_dir: PathLike, records: Sequence[MetricsRecord]) -> None:
    out = Path(out_dir)
    with open(out / "metrics.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([repr(getattr(r, f)) for f in CSV_FIELDS])


def read_metrics(path: PathLike) -> List[MetricsRecord]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.pop("schema", None) != METRICS_SCHEMA:
                raise ValueError(f"{path}:{lineno}: unsupported metrics schema")
            out.append(MetricsRecord(**rec))
    return out


def save_state(path: PathLike, W_main: np.ndarray, shards: Sequence[ShardState], epsilon: float) -> None:
    tensors = {"W_main": W_main}
    for s in shards:
        tensors[f"shard{s.id}.W_prime"] = s.W_prime
        tensors[f"shard{s.id}.mask"] = s.mask.astype(np.int64)
    meta = {"epsilon": float(epsilon), "shards": [
        {"id": s.id, "assigned": sorted(int(i) for i in s.assigned_samples),
         "train_loss": float(s.train_loss), "n_updates": int(s.n_updates)} for s in shards]}
    save_tensors(path, tensors, meta)


def load_state(path: PathLike) -> Tuple[np.ndarray, List[ShardState], float]:
    t, meta = load_tensors(path)
    shards = []
    for info in meta["shards"]:
        sid = int(info["id"])
        shards.append(ShardState(sid, t[f"shard{sid}.W_prime"], t[f"shard{sid}.mask"].astype(np.float64),
                                 set(info["assigned"]), float(info["train_loss"]), int(info["n_updates"])))
    return t["W_main"], shards, float(meta["epsilon"])


def routing_trace(model: ModelState, shards: Sequence[ShardState], W_v: np.ndarray, epsilon: float,
                  examples: Sequence[EditExample]) -> List[dict]:
    rows = []
    for ex in examples:
        rows.append((ex.id, "edit", ex.edit_prompt))
        rows.append((ex.id, "locality", ex.locality_prompt))
    if not rows:
        return []
    _, A = final_states(model, [p for _, _, p in rows])
    targets, scores = route_many(A, shards, W_v, epsilon)
    return [{"id": i, "kind": kind, "scores": [float(v) for v in sc],
             "decision": t if t == MAIN else int(t)}
            for (i, kind, _), t, sc in zip(rows, targets, scores)]


def write_run(out_dir: PathLike, res: RunResult, trace: bool = False) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "manifest.json", res.manifest.to_dict(with_timings=False))
    _dump_json(out / "timings.json", dict(sorted(res.manifest.timings.items())))
    write_metrics(out, res.manifest.records)
    save_model(out / "model.rpt", res.model)
    save_state(out / "state.rpt", res.W_main, res.shards, res.epsilon)
    if trace:
        n = res.manifest.records[-1].step if res.manifest.records else 0
        lines = routing_trace(res.model, res.shards, res.W_main, res.epsilon, res.corpus[:n])
        with open(out / "routing_trace.jsonl", "w") as fh:
            for rec in lines:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return out


def read_manifest(path: PathLike) -> dict:
    data = json.loads(Path(path).read_text())
    if data.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"{path}: unsupported manifest schema {data.get('schema')!r}")
    return data


def load_run(run_dir: PathLike) -> Tuple[dict, ModelState, np.ndarray, List[ShardState], float]:
    run = Path(run_dir)
    for name in ("manifest.json", "model.rpt", "state.rpt"):
        if not (run / name).is_file():
            raise FileNotFoundError(f"{run / name} is missing")
    W_main, shards, eps = load_state(run / "state.rpt")
    return read_manifest(run / "manifest.json"), load_model(run / "model.rpt"), W_main, shards, eps
