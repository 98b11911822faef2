"""Optimization loop, learning-rate schedule, checkpoints and ablation runs."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import StormConfig, TrainConfig
from .errors import ConfigError, DataError, TrainingDiverged
from .market_data import DatasetSplit, WindowSample
from .model import Storm
from .quantizer import usage_entropy, usage_histogram

log = logging.getLogger(__name__)

HISTORY_TAIL = 20


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for ``epoch``: linear warmup from 0, then decay to 0 at ``cfg.epochs``."""
    if not 0 <= epoch < cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    w, E, peak = cfg.warmup_epochs, cfg.epochs, cfg.peak_lr
    if epoch < w:
        return peak * epoch / w
    frac = (epoch - w) / (E - w)
    if cfg.schedule == "cosine":
        return peak * 0.5 * (1.0 + math.cos(math.pi * frac))
    return peak * (1.0 - frac)


# -- data --------------------------------------------------------------------


def stack_samples(samples: Sequence[WindowSample]) -> tuple[torch.Tensor, torch.Tensor]:
    """``(n, W, N, D)`` windows and ``(n, N)`` labels as float32 tensors."""
    if not samples:
        raise DataError("no samples to stack")
    x = np.stack([s.window for s in samples]).astype(np.float32)
    y = np.stack([s.label for s in samples]).astype(np.float32)
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise DataError("non-finite values in samples; normalise features first")
    return torch.from_numpy(x), torch.from_numpy(y)


def train_val_split(samples: Sequence[WindowSample], val_fraction: float):
    """Hold out the chronologically last ``val_fraction`` of the training windows."""
    samples = sorted(samples, key=lambda s: s.anchor_date)
    n_val = int(math.floor(len(samples) * val_fraction))
    if n_val == 0:
        return list(samples), []
    return list(samples[:-n_val]), list(samples[-n_val:])


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    state: dict  # parameter tensors
    manifest: dict

    @property
    def config(self) -> StormConfig:
        return StormConfig.from_dict(self.manifest["model_config"])

    def build(self) -> Storm:
        model = Storm(self.config)
        model.load_state_dict(self.state)
        model.eval()
        return model


def make_checkpoint(model: Storm, manifest: dict) -> Checkpoint:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(state, copy.deepcopy(manifest))


def save_checkpoint(ckpt: Checkpoint, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(ckpt.state, out / "model.pt")
    (out / "manifest.json").write_text(json.dumps(ckpt.manifest, indent=2, sort_keys=True), encoding="utf-8")
    return out


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if path.is_file():
        path = path.parent
    weights, manifest = path / "model.pt", path / "manifest.json"
    if not weights.exists() or not manifest.exists():
        raise ConfigError(f"no checkpoint found at {path}")
    state = torch.load(weights, map_location="cpu", weights_only=True)
    return Checkpoint(state, json.loads(manifest.read_text(encoding="utf-8")))


# -- inference helpers -------------------------------------------------------


@torch.no_grad()
def predict_samples(model: Storm, samples: Sequence[WindowSample], batch_size: int = 64) -> np.ndarray:
    """Prior-path predictions ``(n, N)`` for a sequence of windows."""
    x, _ = stack_samples(samples) if samples else (None, None)
    if x is None:
        return np.zeros((0, model.cfg.n_stocks))
    out = [model.predict(xb) for xb in x.split(batch_size)]
    return torch.cat(out).double().numpy()


@torch.no_grad()
def code_indices(model: Storm, samples: Sequence[WindowSample], batch_size: int = 64) -> dict[str, np.ndarray]:
    """Hard code assignments of every token, per enabled branch."""
    x, _ = stack_samples(samples)
    was = model.training
    model.eval()
    ids: dict[str, list] = {}
    try:
        for xb in x.split(batch_size):
            ts, cs, _ = model.autoencoder(xb)
            for name, br in (("ts", ts), ("cs", cs)):
                if br is not None:
                    ids.setdefault(name, []).append(br.outcome.indices.reshape(-1))
    finally:
        model.train(was)
    return {k: torch.cat(v).numpy() for k, v in ids.items()}


def usage_summary(model: Storm, samples: Sequence[WindowSample], bucket: int = 5) -> dict:
    cfg = model.cfg
    summary = {}
    for name, ids in code_indices(model, samples).items():
        K = cfg.K_ts if name == "ts" else cfg.K_cs
        hist = usage_histogram(ids, K, bucket)
        summary[name] = {
            "K": K,
            "dead_fraction": hist.dead_fraction,
            "entropy": usage_entropy(ids, K),
            "histogram": hist.counts.tolist(),
        }
    return summary


@torch.no_grad()
def evaluate_losses(model: Storm, samples: Sequence[WindowSample], batch_size: int = 64) -> dict[str, float]:
    """Sample-weighted mean of the prior-path loss components on held-out windows."""
    x, y = stack_samples(samples)
    was = model.training
    model.eval()
    totals: dict[str, float] = {}
    try:
        for xb, yb in zip(x.split(batch_size), y.split(batch_size)):
            for k, v in model(xb, yb).components().items():
                totals[k] = totals.get(k, 0.0) + v * len(xb)
    finally:
        model.train(was)
    return {k: v / len(x) for k, v in totals.items()}


# -- fit ---------------------------------------------------------------------


@dataclass
class FitResult:
    model: Storm  # parameters at the final epoch
    history: list[dict]
    final: Checkpoint
    best: Checkpoint
    best_epoch: int
    updated: dict[str, int] = field(default_factory=dict)


def _manifest(cfg: TrainConfig, model_cfg: StormConfig, epoch: int, history, usage, updated, split) -> dict:
    return {
        "train_config": cfg.to_dict(),
        "model_config": model_cfg.to_dict(),
        "epoch": epoch,
        "seed": cfg.seed,
        "loss_tail": history[-HISTORY_TAIL:],
        "usage": usage,
        "parameters_updated": updated,
        "tickers": list(split.tickers),
        "feature_names": list(split.feature_names),
        "norm_stats": split.norm_stats.to_dict() if split.norm_stats is not None else None,
        "boundary_date": str(split.boundary_date),
    }


def _updated_counts(model: Storm, initial: dict[str, torch.Tensor]) -> dict[str, int]:
    """Number of parameter tensors per group whose values moved during training."""
    counts = {}
    for group, params in model.parameter_groups().items():
        counts[group] = sum(int(not torch.equal(p.detach(), initial[n])) for n, p in params)
    return counts


def fit(
    split: DatasetSplit,
    cfg: TrainConfig,
    history_path: str | Path | None = None,
    log_every: int = 0,
) -> FitResult:
    """Train a model on ``split.train`` (already normalised).

    All randomness (initialisation, batch order, factor sampling) is drawn from
    generators seeded with ``cfg.seed``; the caller's global RNG state is left
    untouched.
    """
    cfg.validate()
    fit_samples, val_samples = train_val_split(split.train, cfg.val_fraction)
    x, y = stack_samples(fit_samples)
    N, D = x.shape[2], x.shape[3]
    if x.shape[1] != cfg.W:
        raise ConfigError(f"windows have length {x.shape[1]} but config W={cfg.W}")
    model_cfg = cfg.model_config(N, D)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = Storm(model_cfg)
        model.train()
        gen = torch.Generator().manual_seed(cfg.seed + 1)
        initial = {n: p.detach().clone() for n, p in model.named_parameters()}
        params = [p for p in model.parameters() if p.requires_grad]
        opt = torch.optim.AdamW(params, lr=0.0, weight_decay=cfg.weight_decay, foreach=True)

        history: list[dict] = []
        hist_fh = open(history_path, "w", encoding="utf-8") if history_path else None
        best_val, best_epoch, best_state = math.inf, -1, None
        try:
            for epoch in range(cfg.epochs):
                lr = lr_at(epoch, cfg)
                for g in opt.param_groups:
                    g["lr"] = lr
                order = torch.randperm(len(x), generator=gen)
                sums: dict[str, float] = {}
                for batch in order.split(cfg.batch_size):
                    try:
                        out = model(x[batch], y[batch], generator=gen)
                    except DataError as exc:  # inputs were checked finite, so the parameters blew up
                        raise TrainingDiverged(f"non-finite activations at epoch {epoch}: {exc}") from exc
                    if not torch.isfinite(out.total):
                        parts = out.components()
                        raise TrainingDiverged(f"non-finite loss at epoch {epoch}", parts)
                    opt.zero_grad(set_to_none=True)
                    out.total.backward()
                    if cfg.grad_clip > 0:
                        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                    opt.step()
                    for k, v in out.components().items():
                        sums[k] = sums.get(k, 0.0) + v * len(batch)
                record = {"epoch": epoch, "lr": lr, **{k: v / len(x) for k, v in sums.items()}}
                if val_samples:
                    val = evaluate_losses(model, val_samples)
                    record["val_pred"] = val["pred"]
                    if val["pred"] < best_val:
                        best_val, best_epoch = val["pred"], epoch
                        best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                history.append(record)
                if hist_fh:
                    hist_fh.write(json.dumps(record) + "\n")
                    hist_fh.flush()
                if log_every and (epoch % log_every == 0 or epoch == cfg.epochs - 1):
                    log.info("epoch %d lr %.2e total %.4f", epoch, lr, record["total"])
        finally:
            if hist_fh:
                hist_fh.close()

    model.eval()
    updated = _updated_counts(model, initial)
    usage = usage_summary(model, fit_samples)
    final = make_checkpoint(model, _manifest(cfg, model_cfg, cfg.epochs - 1, history, usage, updated, split))
    if best_state is None:
        best = copy.deepcopy(final)
        best_epoch = cfg.epochs - 1
    else:
        best_model = copy.deepcopy(model)
        best_model.load_state_dict(best_state)
        best_model.eval()
        man = _manifest(cfg, model_cfg, best_epoch, history[: best_epoch + 1], usage_summary(best_model, fit_samples),
                        updated, split)
        man["val_pred"] = best_val
        best = make_checkpoint(best_model, man)
    return FitResult(model, history, final, best, best_epoch, updated)


def fit_ablations(split: DatasetSplit, cfg: TrainConfig, ablations: Sequence[str] = ("none", "no_ts", "no_cs")):
    """One run per ablation flag, otherwise identical configuration."""
    out = {}
    for ab in ablations:
        run_cfg = TrainConfig.from_dict({**cfg.to_dict(), "ablation": ab})
        out[ab] = fit(split, run_cfg)
    return out


def write_history(history: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")


def read_history(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
