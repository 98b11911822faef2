"""Command-line entry point: ``storm <command> [options]``.

Exit codes: 0 success, 1 user or configuration error, 2 internal invariant
violation or unexpected failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import backtest as bt
from .config import ABLATIONS, TrainConfig, env_seed, read_config_file
from .errors import ConfigError, DataError, InvariantViolation, StormError, TrainingDiverged
from .evaluation import DailyPrediction, build_report, rank_ic_series, wealth_metrics, write_daily_ic
from .market_data import (
    FeaturePanel,
    build_split,
    compute_indicators,
    generate_planted_factor,
    generate_synthetic,
    load_bars,
    load_panel,
    normalize_features,
    read_panel_manifest,
    save_panel,
    train_norm_stats,
)

log = logging.getLogger("storm")

DEFAULT_INDICATORS = "ret_1,ret_5,ma_5,std_5"


# -- config resolution -------------------------------------------------------


def _train_flag_names() -> list[str]:
    return [f.name for f in fields(TrainConfig)]


def add_train_flags(p: argparse.ArgumentParser) -> None:
    """One ``--flag`` per TrainConfig field; unset flags fall back to file, then default."""
    g = p.add_argument_group("training overrides")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = {"int": int, "float": float, "str": str, "bool": _parse_bool}[str(f.type)]
        kw = {"choices": ABLATIONS} if f.name == "ablation" else {}
        g.add_argument(flag, dest=f.name, type=kind, default=None, **kw)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    """Precedence: command-line flag > ``STORM_SEED`` (seed only) > config file > default."""
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    TrainConfig.from_dict(values)  # rejects unknown keys before any work
    values["seed"] = env_seed(values.get("seed", TrainConfig().seed))
    for name in _train_flag_names():
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    return TrainConfig.from_dict(values)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str), encoding="utf-8")


# -- data helpers ------------------------------------------------------------


def _build_cache(panel: FeaturePanel, indicators: str, out: Path, W: int, test_fraction: float, boundary) -> dict:
    names = [s for s in (indicators or "").split(",") if s.strip()]
    rows_before = panel.T
    panel = compute_indicators(panel, [n.strip() for n in names]) if names else panel
    split = build_split(panel, W, boundary, test_fraction)
    if not split.train or not split.test:
        raise DataError("the split leaves no training or no test windows; adjust --boundary or --test-fraction")
    stats = train_norm_stats(split.train)
    extra = {
        "split": {"W": W, "boundary_date": str(split.boundary_date), "test_fraction": test_fraction},
        "warmup_rows_dropped": rows_before - panel.T,
    }
    manifest = save_panel(panel, out, stats, extra)
    log.info("cached %d days x %d stocks x %d features in %s", panel.T, panel.N, panel.D, out)
    return manifest


def _load_split(data_dir: Path, W: int):
    panel = load_panel(data_dir)
    man = read_panel_manifest(data_dir)
    boundary = man.get("split", {}).get("boundary_date")
    split = normalize_features(build_split(panel, W, boundary))
    if not split.train or not split.test:
        raise DataError(f"window length {W} leaves no training or test windows in {data_dir}")
    return panel, split


def _daily_predictions(model, samples) -> list[DailyPrediction]:
    from .training import predict_samples

    y_hat = predict_samples(model, samples)
    return [DailyPrediction(s.anchor_date, y_hat[j], s.label) for j, s in enumerate(samples)]


def _prices(panel: FeaturePanel):
    return bt.prices_frame(panel.dates, panel.tickers, panel.feature("close"))


# -- commands ----------------------------------------------------------------


def cmd_ingest(args) -> int:
    panel = load_bars(args.input)  # logs how many dates the inner join dropped
    out = Path(args.out)
    man = _build_cache(panel, args.indicators, out, args.window, args.test_fraction, args.boundary)
    print(json.dumps({"D": man["D"], "T": man["T"], "N": man["N"], "manifest": str(out / "manifest.json")}))
    return 0


def cmd_synth(args) -> int:
    seed = env_seed(args.seed)
    if args.regime == "planted":
        panel, _ = generate_planted_factor(seed, args.n_stocks, args.days)
    else:
        panel = generate_synthetic(seed, args.n_stocks, args.days, args.regime)
    out = Path(args.out)
    man = _build_cache(panel, args.indicators, out, args.window, args.test_fraction, args.boundary)
    print(json.dumps({"D": man["D"], "T": man["T"], "N": man["N"], "manifest": str(out / "manifest.json")}))
    return 0


def _train_one(cfg: TrainConfig, data_dir: Path, out: Path) -> dict:
    from .quantizer import usage_histogram
    from .training import code_indices, fit, save_checkpoint

    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    panel, split = _load_split(data_dir, cfg.W)
    try:
        result = fit(split, cfg, history_path=out / "loss_history.jsonl", log_every=max(1, cfg.epochs // 10))
    except TrainingDiverged as exc:
        _write_json(out / "diverged.json", exc.components)
        raise
    for ckpt in (result.final, result.best):
        ckpt.manifest["data_dir"] = str(Path(data_dir).resolve())
    save_checkpoint(result.final, out / "checkpoint")
    save_checkpoint(result.best, out / "best")
    ids = code_indices(result.model, split.train)
    for name, codes in ids.items():
        K = result.model.cfg.K_ts if name == "ts" else result.model.cfg.K_cs
        usage_histogram(codes, K).to_csv(out / f"usage_{name}.csv")
    preds = _daily_predictions(result.model, split.test)
    ic, icir = rank_ic_series(preds)
    summary = {"rank_ic": ic, "rank_icir": icir, "best_epoch": result.best_epoch,
               "parameters_updated": result.updated, "final_total": result.history[-1]["total"]}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    summary = _train_one(cfg, Path(args.data), Path(args.out))
    print(json.dumps(summary, default=str))
    return 0


def _load_model(path: str):
    from .training import load_checkpoint

    ckpt = load_checkpoint(path)
    return ckpt, ckpt.build()


def _data_dir(args, ckpt) -> Path:
    d = getattr(args, "data", None) or ckpt.manifest.get("data_dir")
    if not d:
        raise ConfigError("no --data given and the checkpoint does not record its data directory")
    return Path(d)


def cmd_predict(args) -> int:
    ckpt, model = _load_model(args.checkpoint)
    _, split = _load_split(_data_dir(args, ckpt), model.cfg.W)
    preds = _daily_predictions(model, split.test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "ticker", "y_hat", "y_true"])
        for p in preds:
            for t, yh, yt in zip(split.tickers, p.y_hat, p.y_true):
                w.writerow([str(p.date), t, repr(float(yh)), repr(float(yt))])
    write_daily_ic(preds, out / "daily_ic.csv")
    report = build_report(preds, None)
    report.to_json(out / "metrics.json")
    print(report.to_json())
    return 0


def cmd_backtest(args) -> int:
    ckpt, model = _load_model(args.checkpoint)
    panel, split = _load_split(_data_dir(args, ckpt), model.cfg.W)
    if args.k > panel.N:
        raise ConfigError(f"--k {args.k} exceeds the number of stocks ({panel.N})")
    preds = _daily_predictions(model, split.test)
    cfg = bt.BacktestConfig(k=args.k, d=args.d, cost_ratio=args.cost, cash=args.cash)
    result = bt.run_backtest(preds, _prices(panel), panel.tickers, cfg)
    worst = max(result.ledger.identity_errors(), default=0.0)
    if worst > 1e-8:
        raise InvariantViolation(f"ledger accounting identity off by {worst:.3e} (relative)")
    out = Path(args.out)
    result.write(out)
    _write_json(out / "config.json", {"checkpoint": args.checkpoint, **vars(cfg)})
    print(result.report.to_json())
    return 0


def cmd_trade(args) -> int:
    from .ppo import PolicyParams, evaluate_policy, save_policy, train_ppo
    from .trading_env import EnvConfig, buy_and_hold_value, make_env

    if args.algo != "ppo":
        raise ConfigError(f"unsupported algorithm {args.algo!r}")
    ckpt, model = _load_model(args.checkpoint)
    panel = load_panel(_data_dir(args, ckpt))
    if args.ticker not in panel.tickers:
        raise DataError(f"unknown ticker {args.ticker!r}")
    man = ckpt.manifest
    from .market_data import NormStats

    stats = NormStats.from_dict(man["norm_stats"]) if man.get("norm_stats") else None
    boundary = np.datetime64(man["boundary_date"], "D")
    start = int(np.searchsorted(panel.dates, boundary))
    env_cfg = EnvConfig(cost_ratio=args.cost, initial_cash=args.cash)
    env = make_env(model, panel, args.ticker, start, None, stats, env_cfg)
    params = PolicyParams(iterations=args.iterations)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base_seed = env_seed(args.seed)
    per_seed = []
    for s in range(args.seeds):
        seed = base_seed + s
        res = train_ppo(lambda: env, params, seed)
        traj = evaluate_policy(res.net, env, greedy=True, seed=seed)
        sdir = out / f"seed_{seed}"
        sdir.mkdir(exist_ok=True)
        env.write_log(sdir / "episode.csv")
        report = wealth_metrics(traj.rewards)
        report.to_json(sdir / "metrics.json")
        save_policy(res, sdir, {"ticker": args.ticker, "checkpoint": args.checkpoint})
        per_seed.append(report.to_dict())
    keys = ("apy", "cw", "cr", "asr", "mdd", "avo")
    mean = {}
    for k in keys:
        vals = [r[k] for r in per_seed if r[k] is not None]
        mean[k] = float(np.mean(vals)) if len(vals) == len(per_seed) else None
    bh = buy_and_hold_value(env.prices, env_cfg, env.start, env.end) / env_cfg.initial_cash
    summary = {"ticker": args.ticker, "seeds": args.seeds, "mean": mean, "buy_and_hold_cw": bh}
    _write_json(out / "summary.json", summary)
    _write_json(out / "config.json", {k: v for k, v in vars(args).items() if k != "func"})
    print(json.dumps(summary))
    return 0


def cmd_sweep_codebook(args) -> int:
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--sizes must be a comma-separated list of integers, got {args.sizes!r}") from None
    if not sizes:
        raise ConfigError("--sizes is empty")
    base = resolve_train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {**base.to_dict(), "sizes": sizes})
    rows = []
    for K in sizes:
        cfg = TrainConfig.from_dict({**base.to_dict(), "K_ts": K, "K_cs": K})
        summary = _train_one(cfg, Path(args.data), out / f"K{K}")
        rows.append((K, summary["rank_ic"], summary["rank_icir"]))
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["size", "rank_ic", "rank_icir"])
        for K, ic, icir in rows:
            w.writerow([K, repr(ic), "" if icir is None else repr(icir)])
    print((out / "sweep.csv").read_text(encoding="utf-8"), end="")
    return 0


def cmd_report(args) -> int:
    """Recompute the metrics of a prediction and/or backtest directory."""
    src = Path(args.input)
    preds = None
    pred_file = src / "predictions.csv"
    if pred_file.exists():
        import pandas as pd

        frame = pd.read_csv(pred_file)
        preds = [DailyPrediction(d, g["y_hat"].to_numpy(), g["y_true"].to_numpy()) for d, g in frame.groupby("date")]
    returns = None
    eq_file = src / "equity.csv"
    if eq_file.exists():
        import pandas as pd

        values = pd.read_csv(eq_file)["value"].to_numpy(dtype=np.float64)
        returns = values[1:] / values[:-1] - 1.0
    if preds is None and returns is None:
        raise DataError(f"{src} holds neither predictions.csv nor equity.csv")
    report = build_report(preds, returns, args.r_f)
    out = Path(args.out) if args.out else src / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(out)
    print(report.to_json())
    return 0


# -- parser ------------------------------------------------------------------


def _add_cache_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--indicators", default=DEFAULT_INDICATORS, help="comma-separated indicator names")
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=64, help="window length used to fit normalisation stats")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--boundary", default=None, help="train/test boundary date (ISO-8601)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="storm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="CSV bars -> indicator panel cache")
    p.add_argument("--input", required=True)
    _add_cache_flags(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic market panel cache")
    p.add_argument("--n-stocks", type=int, default=10)
    p.add_argument("--days", type=int, default=600)
    p.add_argument("--regime", choices=("trend", "mean_revert", "mixed", "planted"), default="mixed")
    p.add_argument("--seed", type=int, default=0)
    _add_cache_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a panel cache")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="test-split predictions and rank IC")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("backtest", help="TopK-Drop backtest on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--k", type=int, default=bt.DEFAULT_K)
    p.add_argument("--d", type=int, default=bt.DEFAULT_D)
    p.add_argument("--cost", type=float, default=bt.DEFAULT_COST)
    p.add_argument("--cash", type=float, default=bt.DEFAULT_CASH)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("trade", help="train PPO trading agents on one stock")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--ticker", required=True)
    p.add_argument("--algo", default="ppo")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--cost", type=float, default=1e-4)
    p.add_argument("--cash", type=float, default=1e6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trade)

    p = sub.add_parser("sweep-codebook", help="train per codebook size and tabulate rank IC")
    p.add_argument("--sizes", default="128,256,512,1024,2048")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    add_train_flags(p)
    p.set_defaults(func=cmd_sweep_codebook)

    p = sub.add_parser("report", help="recompute metrics from a predictions/backtest directory")
    p.add_argument("--input", required=True)
    p.add_argument("--out")
    p.add_argument("--r-f", type=float, default=0.0)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 2
    except StormError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal-error code
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
