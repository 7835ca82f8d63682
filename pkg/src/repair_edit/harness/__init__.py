"""Benchmark generation, metrics, editing loops, persistence and the CLI."""
from .config import PRESETS, ConfigError, RunConfig, benchmark_config, load_config, parse_overrides
from .corpus import EditExample, generate_anchors, generate_corpus, read_corpus, write_corpus
from .loop import RunManifest, RunResult, run_naive_ft, run_repair
from .metrics import MetricsRecord, compute_metrics, compute_ppl, evaluate_edit, overall

__all__ = ["PRESETS", "ConfigError", "RunConfig", "benchmark_config", "load_config", "parse_overrides", "EditExample",
           "generate_anchors", "generate_corpus", "read_corpus", "write_corpus", "RunManifest",
           "RunResult", "run_naive_ft", "run_repair", "MetricsRecord", "compute_metrics",
           "compute_ppl", "evaluate_edit", "overall"]
