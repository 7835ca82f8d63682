"""Command line entry point: ``repair {generate,edit,eval,verify,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .harness.config import PRESETS, ConfigError, RunConfig, load_config, parse_overrides
from .harness.corpus import read_corpus, write_corpus
from .harness.loop import build_corpus, build_model, run_naive_ft, run_repair
from .harness.metrics import compute_metrics
from .harness.persist import OUT_ENV, default_out_dir, load_run, read_manifest, write_run

log = logging.getLogger("repair_edit")

TABLE_FIELDS = ("step", "rel", "gen", "loc", "op", "ppl")


def _config(args) -> RunConfig:
    overrides = parse_overrides(args.set or [])
    if getattr(args, "n", None) is not None:
        overrides["n_edits"] = args.n
        overrides.setdefault("n_facts", max(args.n, RunConfig.n_facts))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides, preset=args.preset)


def _table(rows: Sequence[dict], label: Optional[str] = None) -> List[str]:
    head = (["run"] if label is not None else []) + list(TABLE_FIELDS)
    lines = ["\t".join(head)]
    for r in rows:
        cells = ([label] if label is not None else []) + [
            str(r["step"])] + [f"{r[k]:.6f}" for k in TABLE_FIELDS[1:]]
        lines.append("\t".join(cells))
    return lines


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else default_out_dir() / "corpus.jsonl"
    corpus = build_corpus(cfg, build_model(cfg))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(out, corpus)
    print(f"wrote {len(corpus)} examples to {out}")
    return 0


def cmd_edit(args) -> int:
    cfg = _config(args)
    corpus = read_corpus(args.corpus) if args.corpus else None
    out = Path(args.out) if args.out else default_out_dir() / f"{args.method}_n{cfg.n_edits}_s{cfg.seed}"
    runner = run_repair if args.method == "repair" else run_naive_ft
    res = runner(cfg, corpus)
    write_run(out, res, trace=args.trace)
    if args.report:
        _render(out, {args.method: [r.to_dict() for r in res.manifest.records]},
                res.manifest.routing_snapshot)
    print("\n".join(_table([r.to_dict() for r in res.manifest.records])))
    print(f"status={res.manifest.status} out={out}")
    return 0 if res.manifest.status == "ok" else 1


def cmd_eval(args) -> int:
    manifest, model, W_main, shards, eps = load_run(args.run)
    cfg = RunConfig.from_dict(manifest["config"])
    corpus = read_corpus(args.corpus) if args.corpus else build_corpus(cfg, model)
    n = args.n if args.n is not None else cfg.n_edits
    if not 1 <= n <= len(corpus):
        raise ConfigError(f"cannot evaluate {n} examples from a corpus of {len(corpus)}")
    rec = compute_metrics(model, shards, W_main, corpus[:n], eps, step=n)
    line = json.dumps(rec.to_dict(), sort_keys=True)
    if args.out:
        Path(args.out).write_text(line + "\n")
    print(line)
    return 0


def cmd_verify(args) -> int:
    from .verify import format_table, run_all
    results = run_all(seed=args.seed)
    table = format_table(results, timings=args.timings)
    print(table)
    return 0 if all(r.passed for r in results) else 1


def _render(out: Path, runs: dict, snapshot: Optional[dict]) -> None:
    from .harness.plotting import plot_metric_traces, plot_routing_histogram
    plot_metric_traces(runs, out / "metrics.png")
    plot_routing_histogram(snapshot, out / "routing_hist.png")


def cmd_report(args) -> int:
    runs, lines, snapshot = {}, [], None
    for i, run in enumerate(args.runs):
        m = read_manifest(Path(run) / "manifest.json")
        label = f"{m['method']}:{Path(run).name}"
        runs[label] = m["records"]
        lines.extend(_table(m["records"], label)[0 if i == 0 else 1:])
        snapshot = snapshot or m.get("routing_snapshot")
    out = Path(args.out) if args.out else Path(args.runs[0])
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.tsv").write_text("\n".join(lines) + "\n")
    _render(out, runs, snapshot)
    print("\n".join(lines))
    print(f"figures in {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="repair", description="Sharded lifelong editing of a toy language model.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--preset", choices=sorted(PRESETS), default="toy",
                        help="starting values before --config and --set (default: toy)")
        sp.add_argument("--config", help="YAML or JSON config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--n", type=int, help="number of edits")

    g = sub.add_parser("generate", help="write a synthetic corpus")
    common(g)
    g.add_argument("--out", help=f"corpus file (default ${OUT_ENV}/corpus.jsonl)")
    g.set_defaults(fn=cmd_generate)

    e = sub.add_parser("edit", help="run an editing stream and write a run directory")
    common(e)
    e.add_argument("--method", choices=("repair", "naive"), default="repair")
    e.add_argument("--corpus", help="corpus file from `generate` (default: regenerate from config)")
    e.add_argument("--out", help=f"run directory (default under ${OUT_ENV})")
    e.add_argument("--trace", action="store_true", help="also write routing_trace.jsonl")
    e.add_argument("--report", action="store_true", help="render figures into the run directory")
    e.set_defaults(fn=cmd_edit)

    v = sub.add_parser("eval", help="recompute metrics from a run directory's checkpoints")
    v.add_argument("run", help="run directory written by `edit`")
    v.add_argument("--corpus")
    v.add_argument("--n", type=int, help="evaluate the first N examples")
    v.add_argument("--out", help="write the record to this file too")
    v.set_defaults(fn=cmd_eval)

    c = sub.add_parser("verify", help="run the property suite and print a pass/fail table")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--timings", action="store_true", help="include per-check seconds")
    c.set_defaults(fn=cmd_verify)

    r = sub.add_parser("report", help="tabulate run directories and render figures")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out", help="directory for report.tsv and figures (default: first run)")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"repair: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
