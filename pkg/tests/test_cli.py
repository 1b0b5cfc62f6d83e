import json
from pathlib import Path

import pytest

from polydistill.cli import main

CONFIG_TMPL = """
[data]
data_dir = "{data_dir}"
bpe_merges = 120
max_len = 48
pairs = [
  {{src = "aa", tgt = "en"}},
  {{src = "bb", tgt = "en"}},
]

[model]
d_model = 16
d_ff = 32
n_layers = 1
n_heads = 2
max_len = 48

[train]
total_steps = 30
check_every = 15
tau = 1.0
lambda = 0.5
topk = 3
token_budget = 220
warmup_steps = 20
dev_cap = 12
seed = 9

[decode]
beam = 2
alpha = 1.0
max_len = 14
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Tiny two-pair world shared by the CLI tests, built through the CLI."""
    root = tmp_path_factory.mktemp("cliworld")
    data = root / "data"
    assert main([
        "synth", "--out-dir", str(data), "--pairs", "aa,bb",
        "--train-size", "120", "--dev-size", "24", "--test-size", "24",
        "--vocab", "24", "--min-len", "3", "--max-len", "6", "--seed", "3",
    ]) == 0
    cfg = root / "run.toml"
    cfg.write_text(CONFIG_TMPL.format(data_dir=data))
    assert main(["prepare-data", "--config", str(cfg)]) == 0
    assert main([
        "train-teacher", "--config", str(cfg), "--pair", "aa-en",
        "--out", str(root / "teachers" / "aa-en"), "--steps", "30",
    ]) == 0
    assert main([
        "export-topk", "--config", str(cfg), "--pair", "aa-en",
        "--teacher", str(root / "teachers" / "aa-en" / "model.ckpt"),
        "--out", str(root / "traces" / "aa-en.trace"),
    ]) == 0
    return root, cfg, data


def test_synth_report_and_files(workdir):
    root, cfg, data = workdir
    assert (data / "train.aa-en.src").exists()
    assert (data / "mapping.bb-en.json").exists()
    report = json.loads((data / "synth_report.json").read_text())
    assert report["command"] == "synth"
    assert "timestamp" in report and "run_id" in report


def test_prepare_data_wrote_bpe(workdir):
    root, cfg, data = workdir
    assert (data / "bpe.model").exists()
    report = json.loads((data / "bpe_report.json").read_text())
    assert report["vocab_size"] > 10
    assert report["config"]["train"]["lambda"] == 0.5


def test_teacher_report_echoes_config(workdir):
    root, cfg, data = workdir
    report = json.loads((root / "teachers" / "aa-en" / "report.json").read_text())
    assert report["command"] == "train-teacher"
    assert report["pair"] == "aa-en"
    assert report["config"]["train"]["seed"] == 9
    assert (root / "teachers" / "aa-en" / "model.ckpt").exists()


def test_trace_exported(workdir):
    root, cfg, data = workdir
    from polydistill.traces import load_trace

    trace = load_trace(root / "traces" / "aa-en.trace")
    assert trace.k == 3
    assert trace.num_examples == 120


def test_train_multi_baseline_vs_lambda_zero(workdir, tmp_path):
    root, cfg, data = workdir
    # second teacher + trace so distill mode has all pairs
    assert main([
        "train-teacher", "--config", str(cfg), "--pair", "bb-en",
        "--out", str(root / "teachers" / "bb-en"), "--steps", "30",
    ]) == 0
    assert main([
        "export-topk", "--config", str(cfg), "--pair", "bb-en",
        "--teacher", str(root / "teachers" / "bb-en" / "model.ckpt"),
        "--out", str(root / "traces" / "bb-en.trace"),
    ]) == 0

    assert main([
        "train-multi", "--config", str(cfg), "--mode", "baseline",
        "--out", str(tmp_path / "base"),
    ]) == 0
    assert main([
        "train-multi", "--config", str(cfg), "--mode", "distill", "--lambda", "0",
        "--teachers-dir", str(root / "teachers"), "--traces-dir", str(root / "traces"),
        "--out", str(tmp_path / "lam0"),
    ]) == 0
    base = json.loads((tmp_path / "base" / "report.json").read_text())
    lam0 = json.loads((tmp_path / "lam0" / "report.json").read_text())
    assert [c["bleu"] for c in base["checks"]] == [c["bleu"] for c in lam0["checks"]]
    assert (tmp_path / "base" / "model.ckpt").read_bytes() == (
        tmp_path / "lam0" / "model.ckpt"
    ).read_bytes()


def test_evaluate_writes_report(workdir, tmp_path):
    root, cfg, data = workdir
    out = tmp_path / "eval.json"
    assert main([
        "evaluate", "--config", str(cfg), "--pair", "aa-en", "--split", "dev",
        "--model", str(root / "teachers" / "aa-en" / "model.ckpt"),
        "--cap", "8", "--out", str(out),
    ]) == 0
    report = json.loads(out.read_text())
    assert report["pair"] == "aa-en"
    assert 0.0 <= report["bleu"] <= 100.0


def test_perturb_sigma_zero_row_matches_unperturbed(workdir, tmp_path):
    root, cfg, data = workdir
    out = tmp_path / "probe.csv"
    assert main([
        "perturb", "--config", str(cfg),
        "--model", str(root / "teachers" / "aa-en" / "model.ckpt"),
        "--sigmas", "0.0,0.1", "--out", str(out),
    ]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("sigma,dev_loss,dev_bleu")
    assert len(lines) == 3
    report = json.loads(Path(str(out) + ".report.json").read_text())
    rows = report["rows"]
    assert rows[0]["sigma"] == 0.0
    # the sigma=0 row must equal a fresh unperturbed evaluation
    assert main([
        "perturb", "--config", str(cfg),
        "--model", str(root / "teachers" / "aa-en" / "model.ckpt"),
        "--sigmas", "0.0", "--out", str(tmp_path / "probe0.csv"),
    ]) == 0
    again = json.loads(Path(str(tmp_path / "probe0.csv") + ".report.json").read_text())
    assert again["rows"][0]["dev_loss"] == rows[0]["dev_loss"]
    assert again["rows"][0]["dev_bleu"] == rows[0]["dev_bleu"]


def test_export_seqkd_files_usable(workdir, tmp_path):
    root, cfg, data = workdir
    prefix = str(tmp_path / "pseudo.aa-en")
    assert main([
        "export-seqkd", "--config", str(cfg), "--pair", "aa-en",
        "--teacher", str(root / "teachers" / "aa-en" / "model.ckpt"),
        "--out-prefix", prefix,
    ]) == 0
    src_lines = Path(prefix + ".src").read_text().splitlines()
    tgt_lines = Path(prefix + ".tgt").read_text().splitlines()
    assert len(src_lines) == len(tgt_lines) == 120
    report = json.loads(Path(prefix + ".report.json").read_text())
    assert report["sentences"] == 120

    from polydistill.bpe import load_bpe
    from polydistill.corpus import LanguagePair, load_parallel

    bpe = load_bpe(data / "bpe.model")
    corpus = load_parallel(prefix + ".src", prefix + ".tgt", LanguagePair(0, "aa", "en"), bpe)
    assert len(corpus) + corpus.dropped_empty == 120


def test_back_distill_runs(workdir, tmp_path):
    root, cfg, data = workdir
    assert main([
        "back-distill", "--config", str(cfg), "--pair", "aa-en",
        "--multi", str(root / "teachers" / "bb-en" / "model.ckpt"),
        "--init", str(root / "teachers" / "aa-en" / "model.ckpt"),
        "--steps", "10", "--out", str(tmp_path / "back"),
    ]) == 0
    report = json.loads((tmp_path / "back" / "report.json").read_text())
    assert report["mode"] == "distill"
    assert "back_distill_teacher_bleu" in report


def test_errors_exit_nonzero(workdir, tmp_path, capsys):
    root, cfg, data = workdir
    assert main(["evaluate", "--config", str(cfg), "--pair", "zz-en",
                 "--model", "missing.ckpt"]) == 1
    assert "error" in capsys.readouterr().err
    assert main(["train-multi", "--config", str(cfg), "--mode", "distill",
                 "--out", str(tmp_path / "x")]) == 1
    bad_cfg = tmp_path / "bad.toml"
    bad_cfg.write_text("[train]\nnot_a_key = 3\n")
    assert main(["prepare-data", "--config", str(bad_cfg)]) == 1


def test_cli_flag_overrides_reach_reports(workdir, tmp_path):
    root, cfg, data = workdir
    out = tmp_path / "ov"
    assert main([
        "train-multi", "--config", str(cfg), "--mode", "baseline",
        "--tau", "2.0", "--beam", "1", "--seed", "77",
        "--out", str(out), "--steps", "4",
    ]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["train"]["tau"] == 2.0
    assert report["config"]["decode"]["beam"] == 1
    assert report["config"]["train"]["seed"] == 77
