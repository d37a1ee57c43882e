import csv
import json

import numpy as np
import pytest

from vgprompt import cli
from vgprompt import prompts as P
from vgprompt import trainer
from vgprompt.io import load_tensor, read_json, save_tensor

TINY = """
[model]
d = 16
d_ff = 32
blocks = 2
K = 4
patch = 2
image_h = 8
image_w = 8
[prompt]
M = 2
r = 4
[train]
epochs = 2
batch_size = 8
[data]
n_train = 16
n_val = 8
"""


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "tiny.ini").write_text(TINY)
    return tmp_path


def records(path):
    return [json.loads(l) for l in path.read_text().splitlines()]


# ------------------------------------------------------------------ train
def test_train_one_epoch_writes_one_record(work):
    assert cli.main(["train", "--synthetic", "--epochs", "1", "--config", "tiny.ini"]) == 0
    recs = records(work / "runs/report/metrics.jsonl")
    assert len(recs) == 1 and recs[0]["epoch"] == 1
    for name in ("run.json", "head.vgpt", "backbone/manifest.json", "prompts/manifest.json"):
        assert (work / "runs/checkpoint" / name).is_file()
    param = read_json(work / "runs/report/param_report.json")
    assert param["trainable_params"] == param["closed_form_trainable"]


def test_train_default_config_one_epoch(work):
    assert cli.main(["train", "--synthetic", "--epochs", "1"]) == 0
    assert len(records(work / "runs/report/metrics.jsonl")) == 1


def test_train_rejects_alpha_out_of_range(work, capsys):
    (work / "bad.ini").write_text("[prompt]\nalpha = 1.5\n")
    assert cli.main(["train", "--synthetic", "--config", "bad.ini"]) == 2
    err = capsys.readouterr().err
    assert "alpha" in err and "1.5" in err
    assert not (work / "runs").exists()


def test_train_missing_data_is_input_error(work, capsys):
    assert cli.main(["train", "--config", "tiny.ini"]) == 2
    assert "gen-data" in capsys.readouterr().err


def test_nan_images_abort_with_numeric_exit(work, monkeypatch, capsys):
    real = trainer.make_synthetic

    def poisoned(n, cfg, seed=0, noise=0.5):
        x, y = real(n, cfg, seed=seed, noise=noise)
        x[0, 0, 0, 0] = np.nan
        return x, y

    monkeypatch.setattr(cli, "make_synthetic", poisoned)
    assert cli.main(["train", "--synthetic", "--config", "tiny.ini"]) == 3
    assert "numeric failure" in capsys.readouterr().err


def test_seed_reruns_are_byte_identical(work):
    outs = []
    for i in range(2):
        (work / f"s{i}.ini").write_text(TINY + f"[paths]\ncheckpoint_dir = c{i}\nreport_dir = r{i}\n")
        assert cli.main(["train", "--synthetic", "--seed", "7", "--config", f"s{i}.ini"]) == 0
        assert cli.main(["report", "--config", f"s{i}.ini"]) == 0
        outs.append(work / f"r{i}")
    for name in ("metrics.jsonl", "param_report.json", "report.txt", "report.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    assert (work / "c0/head.vgpt").read_bytes() == (work / "c1/head.vgpt").read_bytes()


def test_different_seeds_differ(work):
    for s in (1, 2):
        (work / f"s{s}.ini").write_text(TINY + f"[paths]\nreport_dir = r{s}\ncheckpoint_dir = c{s}\n")
        assert cli.main(["train", "--synthetic", "--seed", str(s), "--config", f"s{s}.ini"]) == 0
    assert (work / "r1/metrics.jsonl").read_bytes() != (work / "r2/metrics.jsonl").read_bytes()


def test_backbone_checkpoint_unchanged_by_training(work):
    assert cli.main(["train", "--synthetic", "--config", "tiny.ini", "--seed", "3"]) == 0
    (work / "again.ini").write_text(TINY + "[paths]\ncheckpoint_dir = c2\nreport_dir = r2\n")
    assert cli.main(["train", "--synthetic", "--config", "again.ini", "--seed", "3",
                     "--backbone", "runs/checkpoint/backbone"]) == 0
    for f in sorted((work / "runs/checkpoint/backbone").iterdir()):
        assert f.read_bytes() == (work / "c2/backbone" / f.name).read_bytes()


# ------------------------------------------------------- gen-data and eval
def test_gen_data_then_train_and_eval_from_files(work):
    assert cli.main(["gen-data", "--config", "tiny.ini", "--out", "d"]) == 0
    assert load_tensor(work / "d/train_images.vgpt").shape == (16, 8, 8, 3)
    assert load_tensor(work / "d/val_labels.vgpt").shape == (8,)
    assert cli.main(["train", "--config", "tiny.ini", "--data", "d", "--linear-probe"]) == 0
    assert not (work / "runs/checkpoint/prompts").exists()
    assert cli.main(["eval", "--config", "tiny.ini", "--data", "d"]) == 0
    ev = read_json(work / "runs/report/eval.json")
    assert ev["n"] == 8 and ev["mode"] == "linear" and 0.0 <= ev["accuracy"] <= 1.0


def test_eval_rejects_mismatched_config(work, capsys):
    assert cli.main(["train", "--synthetic", "--config", "tiny.ini", "--epochs", "1"]) == 0
    (work / "wide.ini").write_text(TINY.replace("d = 16", "d = 24"))
    assert cli.main(["eval", "--synthetic", "--config", "wide.ini"]) == 2
    assert "model.d" in capsys.readouterr().err


# ---------------------------------------------------------------- verify
def test_verify_passes(capsys):
    assert cli.main(["verify", "--seeds", "100"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 6 and "[FAIL]" not in out
    assert "100 trials" in out


def test_verify_catches_mutated_edge_prompt(monkeypatch, capsys):
    real = P.prompted_block_fused

    def mutated(X, block, bp, K, index=None):
        bp2 = P.BlockPrompt(bp.seeds, bp.P_g, bp.P_e * 1.01, bp.P_n, bp.S1, bp.S2, bp.alpha, bp.beta)
        return real(X, block, bp2, K, index=index)

    monkeypatch.setattr(P, "prompted_block_fused", mutated)
    assert cli.main(["verify"]) == 1
    captured = capsys.readouterr()
    assert "[FAIL] dual-path" in captured.out and "dual-path" in captured.err


# --------------------------------------------------------------- analyze
def features(work, X, name):
    save_tensor(work / name, X)
    return name


def test_analyze_rank_one_features(work, capsys):
    X = np.outer(np.arange(1.0, 11.0), np.linspace(-1, 1, 8))
    assert cli.main(["analyze", "--features", features(work, X, "f.vgpt")]) == 0
    out = capsys.readouterr().out
    assert "layer 0: est_rank 1 of d=8" in out
    assert "eps=0.25" in out and "CUB ~50" in out and "Flowers ~60" in out
    assert read_json(work / "runs/report/analysis.json")["ranks"] == [1]


def test_analyze_rank_three_features(work):
    rng = np.random.default_rng(0)
    U, _ = np.linalg.qr(rng.normal(size=(40, 3)))
    V, _ = np.linalg.qr(rng.normal(size=(12, 3)))
    X = U @ np.diag([1.0, 1.2, 1.4]) @ V.T
    assert cli.main(["analyze", "--features", features(work, X, "f.vgpt"), "--normalization", "none"]) == 0
    rep = read_json(work / "runs/report/analysis.json")
    assert rep["ranks"] == [3] and rep["epsilon"] == 0.25 and rep["mode"] == "relative"
    rows = list(csv.reader(open(work / "runs/report/layer0_coefficients.csv")))
    assert len(rows) == 13


def test_analyze_checkpoint_forward(work, capsys):
    assert cli.main(["train", "--synthetic", "--config", "tiny.ini", "--epochs", "1"]) == 0
    assert cli.main(["analyze", "--synthetic", "--config", "tiny.ini", "--n-images", "2",
                     "--dump-features", "feats"]) == 0
    rep = read_json(work / "runs/report/analysis.json")
    assert len(rep["ranks"]) == 3 and all(1 <= r < 16 for r in rep["ranks"])
    assert load_tensor(work / "feats/layer1.vgpt").shape == (32, 16)
    assert load_tensor(work / "runs/report/layer0_rgb.vgpt").shape == (32, 3)


def test_analyze_image_dim_mismatch(work, capsys):
    assert cli.main(["train", "--synthetic", "--config", "tiny.ini", "--epochs", "1"]) == 0
    save_tensor(work / "imgs.vgpt", np.zeros((2, 6, 6, 3)))
    assert cli.main(["analyze", "--config", "tiny.ini", "--data", "imgs.vgpt"]) == 2
    assert "model.image_h" in capsys.readouterr().err


def test_analyze_missing_checkpoint(work):
    assert cli.main(["analyze", "--synthetic"]) == 2


# ---------------------------------------------------------------- report
def test_report_rows_and_reference(work, capsys):
    assert cli.main(["train", "--synthetic", "--config", "tiny.ini"]) == 0
    assert cli.main(["report", "--config", "tiny.ini"]) == 0
    out = capsys.readouterr().out
    ref = next(l for l in out.splitlines() if l.startswith("reference"))
    assert "-94.6%" in ref and "+3.1%" in ref and "48.68M" in ref and "2.61M" in ref
    rows = list(csv.reader(open(work / "runs/report/report.csv")))
    param = read_json(work / "runs/report/param_report.json")
    ours = rows[2]
    expect = cli.fmt_change(100 * (param["trainable_params"] / param["full_finetune_params"] - 1))
    assert ours[3] == expect and ours[0] == "this run (vgp)"
    assert ours[4] == cli.fmt_change(param["flop_overhead_pct"])
    assert float(ours[5]) == records(work / "runs/report/metrics.jsonl")[-1]["train_acc"]


def test_report_identical_totals_print_zero_change():
    param = {"full_finetune_params": 1000, "trainable_params": 1000, "flop_overhead_pct": 0.0, "mode": "x"}
    row = cli.report_rows(param)[2]
    assert row[3] == "0.0%" and row[4] == "0.0%"
    assert cli.fmt_change(-0.04) == "0.0%" and cli.fmt_change(0.06) == "+0.1%"


def test_report_toy_percentages_match_closed_form():
    full = 100000
    n = trainer.closed_form_trainable(4, 64, 8, 4, 10)
    row = cli.report_rows({"full_finetune_params": full, "trainable_params": n, "flop_overhead_pct": 3.14})[2]
    assert row[3] == f"{100 * (n / full - 1):+.1f}%" and row[4] == "+3.1%"


def test_report_missing_file(work, capsys):
    assert cli.main(["report"]) == 2
    assert "missing file" in capsys.readouterr().err
