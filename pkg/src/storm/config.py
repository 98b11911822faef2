"""Flat run configuration and the model configuration derived from it."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

ABLATIONS = ("none", "no_ts", "no_cs")


@dataclass(frozen=True)
class LossWeights:
    ortho: float = 0.1
    div: float = 0.1
    recon: float = 1e-3
    commit: float = 1.0
    clip: float = 1e-3
    pred: float = 0.1
    kl: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be non-negative")


@dataclass(frozen=True)
class StormConfig:
    """Architecture of one model instance. ``n_stocks`` and ``n_features`` come from the data."""

    n_stocks: int
    n_features: int
    W: int = 64
    p: int = 4
    H: int = 256
    K_ts: int = 512
    K_cs: int = 512
    K_f: int = 32
    enc_layers: int = 4
    enc_heads: int = 4
    dec_layers: int = 2
    dec_heads: int = 8
    fusion_layers: int = 1
    fusion_heads: int = 4
    mlp_ratio: float = 4.0
    dropout: float = 0.0
    soft_temperature: float = 1.0
    ablation: str = "none"
    bypass_quantizer: bool = False
    label_norm: str = "cs_zscore"
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        if self.W % self.p:
            raise ConfigError(f"patch length {self.p} does not divide window length {self.W}")
        if self.label_norm not in ("cs_zscore", "none"):
            raise ConfigError("label_norm must be 'cs_zscore' or 'none'")
        for name in ("H", "K_ts", "K_cs", "K_f", "n_stocks", "n_features"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def use_ts(self) -> bool:
        return self.ablation != "no_ts"

    @property
    def use_cs(self) -> bool:
        return self.ablation != "no_cs"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> StormConfig:
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        return cls(**d)


@dataclass
class TrainConfig:
    """Every knob of a training run in one flat structure."""

    batch_size: int = 16
    epochs: int = 1000
    warmup_epochs: int = 100
    peak_lr: float = 1e-4
    weight_decay: float = 0.05
    schedule: str = "linear"
    grad_clip: float = 1.0
    val_fraction: float = 0.1
    seed: int = 0
    ablation: str = "none"
    W: int = 64
    p: int = 4
    H: int = 256
    K_ts: int = 512
    K_cs: int = 512
    K_f: int = 32
    enc_layers: int = 4
    enc_heads: int = 4
    dec_layers: int = 2
    dec_heads: int = 8
    fusion_layers: int = 1
    fusion_heads: int = 4
    mlp_ratio: float = 4.0
    dropout: float = 0.0
    soft_temperature: float = 1.0
    bypass_quantizer: bool = False
    label_norm: str = "cs_zscore"
    lambda_ortho: float = 0.1
    lambda_div: float = 0.1
    lambda_recon: float = 1e-3
    lambda_commit: float = 1.0
    lambda_clip: float = 1e-3
    lambda_pred: float = 0.1
    lambda_kl: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must satisfy 0 <= warmup_epochs < epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.schedule not in ("linear", "cosine"):
            raise ConfigError("schedule must be 'linear' or 'cosine'")
        if self.peak_lr < 0 or self.weight_decay < 0:
            raise ConfigError("learning rate and weight decay must be non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        self.loss_weights()

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            ortho=self.lambda_ortho,
            div=self.lambda_div,
            recon=self.lambda_recon,
            commit=self.lambda_commit,
            clip=self.lambda_clip,
            pred=self.lambda_pred,
            kl=self.lambda_kl,
        )

    def model_config(self, n_stocks: int, n_features: int) -> StormConfig:
        names = {f.name for f in fields(StormConfig)} - {"n_stocks", "n_features", "weights"}
        kwargs = {k: getattr(self, k) for k in names}
        return StormConfig(n_stocks=n_stocks, n_features=n_features, weights=self.loss_weights(), **kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def read_config_file(path: str | Path) -> dict:
    """Load a JSON or YAML mapping."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping")
    return data


def env_seed(default: int) -> int:
    raw = os.environ.get("STORM_SEED")
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"STORM_SEED must be an integer, got {raw!r}") from None
