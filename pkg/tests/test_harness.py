import json
import math

import numpy as np
import pytest
import yaml
from hypothesis import given, strategies as st

from repair_edit import cli
from repair_edit.harness import (ConfigError, RunConfig, benchmark_config, compute_metrics, compute_ppl,
                                 generate_anchors, generate_corpus, load_config, overall,
                                 parse_overrides, read_corpus, run_naive_ft, run_repair,
                                 write_corpus)
from repair_edit.harness.corpus import corpus_keys, subject_pool
from repair_edit.harness.loop import build_corpus, build_model, windows
from repair_edit.harness.metrics import correctness_many
from repair_edit.harness.persist import load_run, read_metrics, write_run
from repair_edit.sidememory import MAIN
from repair_edit.toylm import ce_from_cache, greedy_decode, init_model, teacher_forced

SMALL = dict(n_edits=6, n_facts=12, n_iter=10, n_anchors=40, n_calibration=10, edit_window=3,
             merge_cadence=6)


def small_cfg(**kw):
    return RunConfig.from_dict(dict(SMALL, **kw))


@pytest.fixture(scope="module")
def model64():
    return init_model(vocab_size=64, hidden_dim=16, ffn_dim=32, seed=0)


@pytest.fixture(scope="module")
def small_run():
    return run_repair(small_cfg())


# ---- corpus ---------------------------------------------------------------

def test_corpus_invariants(model64):
    corpus = generate_corpus(20, 64, 2, 0, model64)
    assert [ex.id for ex in corpus] == list(range(20))
    edit_subj = set(subject_pool(64, True).tolist())
    for ex in corpus:
        assert all(r != ex.edit_prompt and r[-3:] == ex.edit_prompt for r in ex.rephrases)
        assert ex.edit_target != greedy_decode(model64, ex.edit_prompt, 2)
        assert ex.locality_reference == greedy_decode(model64, ex.locality_prompt, 2)
        assert not set(ex.locality_prompt[1:]) & edit_subj
    assert len({tuple(ex.edit_prompt) for ex in corpus}) == 20


def test_corpus_deterministic_and_roundtrip(model64, tmp_path):
    a = generate_corpus(8, 64, 3, 5, model64)
    assert a == generate_corpus(8, 64, 3, 5, model64)
    write_corpus(tmp_path / "c.jsonl", a)
    assert read_corpus(tmp_path / "c.jsonl") == a


def test_corpus_rejects_bad_input(model64, tmp_path):
    with pytest.raises(ValueError):
        generate_corpus(0, 64, 1, 0, model64)
    with pytest.raises(ValueError):
        generate_corpus(3, 32, 1, 0, model64)
    (tmp_path / "bad.jsonl").write_text(json.dumps({"schema": "other"}) + "\n")
    with pytest.raises(ValueError):
        read_corpus(tmp_path / "bad.jsonl")


def test_anchors_avoid_corpus_keys(model64):
    corpus = generate_corpus(10, 64, 1, 0, model64)
    anchors = generate_anchors(corpus, 64, 50, 0)
    keys = corpus_keys(corpus)
    assert len(anchors) == 50 and not {tuple(a) for a in anchors} & keys


# ---- config ---------------------------------------------------------------

def test_config_defaults_validate():
    cfg = RunConfig().validate()
    assert (cfg.gamma1, cfg.gamma2, cfg.gamma) == (2.0, 20.0, 10.0)
    assert cfg.mask_ratio == 0.2 and cfg.tau_correct == 0.85 and cfg.max_iter == 10000


@pytest.mark.parametrize("bad", [{"n_edits": 0}, {"mode": "chat"}, {"mask_ratio": 1.5},
                                 {"nope": 1}, {"n_iter": 2.5}, {"gamma1": 30.0},
                                 {"soft_kd": "maybe"}, {"schema": "repair-config/0"}])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)


def test_overrides_and_files(tmp_path):
    assert parse_overrides(["n_iter=5", "epsilon=null", "mode=qa"]) == {
        "n_iter": 5, "epsilon": None, "mode": "qa"}
    with pytest.raises(ConfigError):
        parse_overrides(["n_iter"])
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"n_iter": 7, "seed": 3}))
    cfg = load_config(str(tmp_path / "c.yaml"), {"seed": 4})
    assert cfg.n_iter == 7 and cfg.seed == 4
    (tmp_path / "c.json").write_text(json.dumps({"edit_lr": 0.2}))
    assert load_config(str(tmp_path / "c.json")).edit_lr == 0.2
    (tmp_path / "broken.yaml").write_text("n_iter: [1,\n")
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "broken.yaml"))
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.yaml"))


# ---- metrics --------------------------------------------------------------

@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_overall_is_geometric_mean(r, g, l):
    assert abs(overall(r, g, l) - (r * g * l) ** (1 / 3)) < 1e-12


def test_no_edits_means_full_locality(model64):
    corpus = generate_corpus(6, 64, 1, 0, model64)
    rec = compute_metrics(model64, [], model64.W_v, corpus, 0.0)
    assert rec.loc == 1.0 and rec.rel == 0.0 and rec.op == 0.0


def test_uniform_ppl_equals_vocab():
    m = init_model(vocab_size=37, hidden_dim=4, ffn_dim=4, seed=0)
    m.unembed[:] = 0
    assert abs(compute_ppl(m, [], m.W_v, 0.0, [([1, 2], [3, 4]), ([5], [6])]) - 37) < 1e-9


def test_memorized_continuation_ppl_near_one():
    m = init_model(vocab_size=12, hidden_dim=8, ffn_dim=16, seed=3)
    tf = teacher_forced(m, [3, 7, 2], [9, 4])
    V = m.W_v.copy()
    for _ in range(3000):
        _, g = ce_from_cache(m, tf, V, with_grad=True)
        V -= 0.5 * g
    assert compute_ppl(m, [], V, 0.0, [([3, 7, 2], [9, 4])]) < 1.05


def test_ppl_deterministic(model64):
    pairs = [([4, 9, 11], [20, 21])]
    assert compute_ppl(model64, [], model64.W_v, 0.0, pairs) == compute_ppl(model64, [], model64.W_v, 0.0, pairs)


def test_correctness_reports_route_target(model64):
    corpus = generate_corpus(3, 64, 1, 0, model64)
    res = correctness_many(model64, [], model64.W_v, 0.0, corpus, "hallucination")
    assert all(t == MAIN and 0.0 <= v <= 1.0 for t, v in res)


# ---- loop -----------------------------------------------------------------

def test_windows_respect_merge_boundaries():
    assert windows(12, 5, 6) == [(0, 5), (5, 6), (6, 11), (11, 12)]
    assert windows(3, 5, 30) == [(0, 3)]


def test_single_edit_run():
    cfg = benchmark_config(n_edits=1, n_facts=12, n_anchors=100)
    model = build_model(cfg)
    corpus = build_corpus(cfg, model)
    rec = run_repair(cfg, corpus, model).manifest.records[-1]
    assert rec.rel == 1.0 and rec.loc == 1.0
    assert run_naive_ft(cfg, corpus, model).manifest.records[-1].rel == 1.0


def test_run_manifest_is_complete(small_run):
    man = small_run.manifest
    assert man.status == "ok"
    assert [r.step for r in man.records] == [3, 6]
    assert man.merges and man.routing_snapshot is not None and man.calibration
    for rec in man.records:
        assert abs(rec.op - overall(rec.rel, rec.gen, rec.loc)) <= 1e-12
    assert set(man.timings) >= {"train", "feedback", "metrics", "total"}


def test_runs_are_deterministic(small_run):
    again = run_repair(small_cfg())
    assert again.manifest.to_dict(with_timings=False) == small_run.manifest.to_dict(with_timings=False)
    assert np.array_equal(again.W_main, small_run.W_main)


def test_corpus_too_small_rejected():
    cfg = small_cfg()
    model = build_model(cfg)
    with pytest.raises(ValueError):
        run_repair(cfg, build_corpus(cfg, model)[:2], model)


def test_divergence_aborts_with_manifest(monkeypatch):
    from repair_edit.harness import loop

    def bad(model, tf, V, with_grad=False):
        return (math.nan, np.zeros_like(V)) if with_grad else math.nan
    monkeypatch.setattr(loop, "ce_from_cache", bad)
    res = loop.run_repair(small_cfg())
    assert res.manifest.status == "aborted"
    assert sum(e["event"] == "skipped_step" for e in res.manifest.events) == loop.MAX_BAD_STEPS


# ---- persistence ----------------------------------------------------------

def test_run_dir_roundtrip(small_run, tmp_path):
    out = write_run(tmp_path / "run", small_run, trace=True)
    assert read_metrics(out / "metrics.jsonl") == small_run.manifest.records
    manifest, model, W_main, shards, eps = load_run(out)
    assert manifest["method"] == "repair" and "timings" not in manifest
    assert np.array_equal(W_main, small_run.W_main) and eps == small_run.epsilon
    for a, b in zip(shards, small_run.shards):
        assert np.array_equal(a.W_prime, b.W_prime) and np.array_equal(a.mask, b.mask)
    rec = compute_metrics(model, shards, W_main, small_run.corpus[:6], eps, 6)
    assert rec == small_run.manifest.records[-1]
    trace = [json.loads(l) for l in (out / "routing_trace.jsonl").read_text().splitlines()]
    assert len(trace) == 12 and {t["kind"] for t in trace} == {"edit", "locality"}


def test_load_run_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_run(tmp_path)


# ---- CLI ------------------------------------------------------------------

SMALL_ARGS = [f"--set={k}={v}" for k, v in SMALL.items() if k != "n_edits"] + ["--n", "6"]


def test_cli_generate_edit_eval_report(tmp_path, capsys):
    corpus = tmp_path / "c.jsonl"
    assert cli.main(["generate", "--out", str(corpus)] + SMALL_ARGS) == 0
    assert len(read_corpus(corpus)) == 12
    run = tmp_path / "run"
    assert cli.main(["edit", "--corpus", str(corpus), "--out", str(run), "--report"] + SMALL_ARGS) == 0
    assert (run / "metrics.png").stat().st_size > 0 and (run / "routing_hist.png").stat().st_size > 0
    naive = tmp_path / "naive"
    assert cli.main(["edit", "--method", "naive", "--out", str(naive)] + SMALL_ARGS) == 0
    capsys.readouterr()
    assert cli.main(["eval", str(run), "--corpus", str(corpus), "--out", str(tmp_path / "e.json")]) == 0
    rec = json.loads((tmp_path / "e.json").read_text())
    assert rec == read_metrics(run / "metrics.jsonl")[-1].to_dict()
    rep = tmp_path / "rep"
    assert cli.main(["report", str(run), str(naive), "--out", str(rep)]) == 0
    lines = (rep / "report.tsv").read_text().splitlines()
    assert lines[0].startswith("run\tstep") and len(lines) == 5
    assert (rep / "metrics.png").exists()


def test_cli_edit_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["edit", "--out", str(tmp_path / name)] + SMALL_ARGS) == 0
    for f in ("metrics.jsonl", "metrics.csv", "manifest.json", "state.rpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_cli_out_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv("REPAIR_OUT_DIR", str(tmp_path))
    assert cli.main(["generate"] + SMALL_ARGS) == 0
    assert (tmp_path / "corpus.jsonl").is_file()


def test_cli_malformed_config_fails_cleanly(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("n_iter: -3\n")
    out = tmp_path / "never"
    assert cli.main(["edit", "--config", str(bad), "--out", str(out)]) == 2
    assert "error" in capsys.readouterr().err and not out.exists()
    assert cli.main(["generate", "--set", "bogus=1", "--out", str(out / "c.jsonl")]) == 2
    assert not out.exists()
    assert cli.main(["eval", str(tmp_path / "nowhere")]) == 2


def test_cli_verify_passes(capsys):
    assert cli.main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 8


def test_presets_layer_under_overrides():
    cfg = load_config(None, {"n_iter": 5}, preset="benchmark")
    assert cfg.vocab_size == 256 and cfg.n_iter == 5
    assert benchmark_config(n_edits=300).n_facts >= 300
    with pytest.raises(ConfigError):
        load_config(None, None, preset="huge")
