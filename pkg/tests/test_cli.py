import csv
import json
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from storm.cli import main
from storm.market_data import generate_synthetic, write_bars_csv

TINY = ["--epochs", "2", "--warmup-epochs", "1", "--W", "8", "--p", "2", "--H", "8", "--K-ts", "8", "--K-cs", "8",
        "--K-f", "2", "--enc-layers", "1", "--enc-heads", "2", "--dec-layers", "1", "--dec-heads", "2",
        "--fusion-heads", "2", "--batch-size", "32"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--n-stocks", "6", "--days", "120", "--window", "8", "--indicators", "ret_1",
                 "--out", str(data)]) == 0
    run = root / "run"
    assert main(["train", "--data", str(data), "--out", str(run), *TINY]) == 0
    return root, data, run


# -- ingest ---------------------------------------------------------------------


def test_ingest_valid_and_idempotent(tmp_path, capsys):
    csv_path = tmp_path / "bars.csv"
    write_bars_csv(generate_synthetic(1, 3, 80), csv_path)
    args = ["ingest", "--input", str(csv_path), "--indicators", "ret_1,ma_5", "--window", "8"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["D"] == 7
    first = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert first["D"] == 7 and first["feature_names"][-2:] == ["ret_1", "ma_5"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    second = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert first["values_sha256"] == second["values_sha256"] and first == second


def test_ingest_bad_row_names_line(tmp_path, capsys):
    csv_path = tmp_path / "bars.csv"
    write_bars_csv(generate_synthetic(1, 2, 30), csv_path)
    lines = csv_path.read_text().splitlines()
    lines[4] = lines[4].split(",", 2)[0] + ",X,abc,1,1,1,1"
    csv_path.write_text("\n".join(lines) + "\n")
    assert main(["ingest", "--input", str(csv_path), "--out", str(tmp_path / "o")]) == 1
    assert "line 5" in capsys.readouterr().err


def test_missing_input_exit_1(tmp_path):
    assert main(["ingest", "--input", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o")]) == 1


# -- train ------------------------------------------------------------------------


def test_train_outputs(workspace):
    _, _, run = workspace
    for name in ("config.json", "loss_history.jsonl", "summary.json", "usage_ts.csv", "usage_cs.csv"):
        assert (run / name).exists(), name
    for d in ("checkpoint", "best"):
        assert (run / d / "model.pt").exists() and (run / d / "manifest.json").exists()
    history = [json.loads(line) for line in (run / "loss_history.jsonl").read_text().splitlines()]
    assert [h["epoch"] for h in history] == [0, 1]
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["epochs"] == 2 and cfg["K_ts"] == 8


def test_train_is_deterministic_and_ablation_differs(workspace):
    root, data, run = workspace
    again = root / "again"
    assert main(["train", "--data", str(data), "--out", str(again), *TINY]) == 0
    assert (again / "loss_history.jsonl").read_text() == (run / "loss_history.jsonl").read_text()
    ab = root / "no_ts"
    assert main(["train", "--data", str(data), "--out", str(ab), *TINY, "--ablation", "no_ts"]) == 0
    m_full = json.loads((run / "checkpoint" / "manifest.json").read_text())
    m_ab = json.loads((ab / "checkpoint" / "manifest.json").read_text())
    assert m_ab["parameters_updated"]["ts"] == 0 and m_full["parameters_updated"]["ts"] > 0
    assert m_ab["model_config"]["ablation"] == "no_ts"


def test_config_precedence_and_seed_env(workspace, tmp_path, monkeypatch):
    from storm.cli import build_parser, resolve_train_config

    _, data, _ = workspace
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"epochs": 7, "warmup_epochs": 1, "seed": 3, "H": 12}))
    parse = build_parser().parse_args
    args = parse(["train", "--config", str(cfg_file), "--data", str(data), "--out", "x", "--H", "16"])
    monkeypatch.delenv("STORM_SEED", raising=False)
    cfg = resolve_train_config(args)
    assert (cfg.epochs, cfg.H, cfg.seed) == (7, 16, 3)
    monkeypatch.setenv("STORM_SEED", "11")
    assert resolve_train_config(args).seed == 11
    args = parse(["train", "--config", str(cfg_file), "--data", str(data), "--out", "x", "--seed", "5"])
    assert resolve_train_config(args).seed == 5


def test_unknown_config_key_rejected_before_work(workspace, tmp_path):
    _, data, _ = workspace
    cfg_file = tmp_path / "c.yaml"
    cfg_file.write_text("epochs: 3\nwarmup_epochs: 1\nlearning_rate: 0.1\n")
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg_file), "--data", str(data), "--out", str(out)]) == 1
    assert not out.exists()


# -- predict / backtest / report ------------------------------------------------------


def test_predict_and_report(workspace, tmp_path):
    _, _, run = workspace
    out = tmp_path / "pred"
    assert main(["predict", "--checkpoint", str(run / "checkpoint"), "--out", str(out)]) == 0
    frame = pd.read_csv(out / "predictions.csv")
    assert list(frame.columns) == ["date", "ticker", "y_hat", "y_true"]
    metrics = json.loads((out / "metrics.json").read_text())
    assert main(["report", "--input", str(out)]) == 0
    again = json.loads((out / "report.json").read_text())
    assert again["rank_ic"] == pytest.approx(metrics["rank_ic"], abs=1e-12)
    daily = pd.read_csv(out / "daily_ic.csv")
    assert daily["rank_ic"].mean() == pytest.approx(metrics["rank_ic"], abs=1e-12)


def test_backtest_outputs_and_defaults(workspace, tmp_path):
    from storm.cli import build_parser

    _, _, run = workspace
    defaults = build_parser().parse_args(["backtest", "--checkpoint", "c", "--out", "o"])
    assert (defaults.k, defaults.d, defaults.cost, defaults.cash) == (5, 3, 1e-4, 1e6)
    out = tmp_path / "bt"
    assert main(["backtest", "--checkpoint", str(run / "checkpoint"), "--out", str(out)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    for key in ("rank_ic", "rank_icir", "apy", "cw", "cr", "asr", "mdd", "avo"):
        assert key in metrics
    eq = pd.read_csv(out / "equity.csv")
    assert eq["value"].iloc[-1] / eq["value"].iloc[0] == pytest.approx(metrics["cw"], rel=1e-12)
    with open(out / "ledger.csv") as fh:
        assert next(csv.reader(fh)) == ["date", "ticker", "side", "shares", "price", "cost"]
    assert json.loads((out / "config.json").read_text())["k"] == 5
    assert main(["report", "--input", str(out), "--out", str(tmp_path / "r.json")]) == 0
    assert json.loads((tmp_path / "r.json").read_text())["cw"] == pytest.approx(metrics["cw"], rel=1e-12)


def test_backtest_errors(workspace, tmp_path):
    _, _, run = workspace
    assert main(["backtest", "--checkpoint", str(run / "checkpoint"), "--k", "7", "--out", str(tmp_path / "b")]) == 1
    assert main(["backtest", "--checkpoint", str(tmp_path / "nothing"), "--out", str(tmp_path / "b")]) == 1
    assert main(["report", "--input", str(tmp_path)]) == 1


# -- trade / sweep ---------------------------------------------------------------------


def test_trade_per_seed_outputs(workspace, tmp_path):
    _, _, run = workspace
    out = tmp_path / "trade"
    assert main(["trade", "--checkpoint", str(run / "checkpoint"), "--ticker", "S001", "--seeds", "2",
                 "--iterations", "2", "--out", str(out)]) == 0
    seed_dirs = sorted(out.glob("seed_*"))
    assert [d.name for d in seed_dirs] == ["seed_0", "seed_1"]
    per = [json.loads((d / "metrics.json").read_text()) for d in seed_dirs]
    for d in seed_dirs:
        assert (d / "episode.csv").exists() and (d / "policy.pt").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["mean"]["cw"] == pytest.approx(np.mean([p["cw"] for p in per]), rel=1e-12)
    episode = pd.read_csv(seed_dirs[0] / "episode.csv")
    assert list(episode.columns) == ["t", "action", "price", "position", "cash", "value", "reward"]
    assert np.prod(1 + episode["reward"]) == pytest.approx(per[0]["cw"], rel=1e-9)


def test_trade_errors(workspace, tmp_path):
    _, _, run = workspace
    base = ["trade", "--checkpoint", str(run / "checkpoint"), "--out", str(tmp_path / "t"), "--seeds", "1"]
    assert main([*base, "--ticker", "NOPE"]) == 1
    assert main([*base, "--ticker", "S000", "--algo", "sac"]) == 1


def test_sweep_codebook(workspace, tmp_path):
    _, data, _ = workspace
    out = tmp_path / "sweep"
    assert main(["sweep-codebook", "--sizes", "4,8", "--data", str(data), "--out", str(out), *TINY]) == 0
    frame = pd.read_csv(out / "sweep.csv")
    assert list(frame.columns) == ["size", "rank_ic", "rank_icir"] and frame["size"].tolist() == [4, 8]
    assert (out / "K4" / "checkpoint" / "manifest.json").exists()
    assert main(["sweep-codebook", "--sizes", "a,b", "--data", str(data), "--out", str(out)]) == 1


def test_console_script_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "storm.cli", "synth", "--n-stocks", "3", "--days", "90",
                           "--window", "8", "--out", str(tmp_path / "d")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["N"] == 3
