"""Time-series and cross-sectional VQ-VAE branches and their joint objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .config import LossWeights, StormConfig
from .errors import ConfigError
from .quantizer import Codebook, QuantizationOutcome, diversity_loss, orthogonality_loss, quantize
from .sequence import (
    AttentionConfig,
    Decoder,
    Encoder,
    PatchEmbedding,
    cs_patchify,
    cs_unpatchify,
    ts_patchify,
    ts_unpatchify,
)


@dataclass
class BranchOutput:
    z_e: torch.Tensor  # ts: (B, N, W/p, H); cs: (B, W, H)
    outcome: QuantizationOutcome
    recon: torch.Tensor  # (B, W, N, D)
    recon_loss: torch.Tensor  # mean squared error over all elements


class Branch(nn.Module):
    """patch -> embed -> encode -> quantize -> decode for one axis.

    The TS branch attends only within each stock's own sequence of patches,
    so a stock's TS latents depend on that stock's data alone.
    """

    def __init__(self, axis: str, cfg: StormConfig, K: int):
        super().__init__()
        if axis not in ("ts", "cs"):
            raise ConfigError(f"unknown branch {axis!r}")
        self.axis = axis
        self.p, self.N, self.D, self.W = cfg.p, cfg.n_stocks, cfg.n_features, cfg.W
        if axis == "ts":
            patch_dim, pos_shape = cfg.p * cfg.n_features, (cfg.n_stocks, cfg.W // cfg.p)
        else:
            patch_dim, pos_shape = cfg.n_stocks * cfg.n_features, (cfg.W,)
        enc = AttentionConfig(cfg.enc_layers, cfg.enc_heads, cfg.H, cfg.mlp_ratio, cfg.dropout)
        dec = AttentionConfig(cfg.dec_layers, cfg.dec_heads, cfg.H, cfg.mlp_ratio, cfg.dropout)
        self.embed = PatchEmbedding(patch_dim, cfg.H, pos_shape)
        self.encoder = Encoder(enc)
        self.codebook = Codebook(K, cfg.H, axis)
        self.decoder = Decoder(dec, patch_dim, pos_shape)
        self.temperature = cfg.soft_temperature
        self.bypass = cfg.bypass_quantizer

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        return ts_patchify(x, self.p) if self.axis == "ts" else cs_patchify(x)

    def unpatchify(self, patches: torch.Tensor) -> torch.Tensor:
        if self.axis == "ts":
            return ts_unpatchify(patches, self.p, self.D)
        return cs_unpatchify(patches, self.N, self.D)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(self.embed(self.patchify(x)))

    def forward(self, x: torch.Tensor) -> BranchOutput:
        z_e = self.encode(x)
        outcome = quantize(z_e, self.codebook, self.temperature, bypass=self.bypass)
        recon = self.unpatchify(self.decoder(outcome.quantized))
        return BranchOutput(z_e, outcome, recon, ((x - recon) ** 2).mean())


@dataclass
class JointLossBreakdown:
    ortho: torch.Tensor
    div: torch.Tensor
    recon_ts: torch.Tensor
    recon_cs: torch.Tensor
    commit_ts: torch.Tensor
    commit_cs: torch.Tensor
    codebook_ts: torch.Tensor
    codebook_cs: torch.Tensor
    total: torch.Tensor
    weights: LossWeights = field(default_factory=LossWeights)

    def as_floats(self) -> dict[str, float]:
        names = ("ortho", "div", "recon_ts", "recon_cs", "commit_ts", "commit_cs", "codebook_ts", "codebook_cs", "total")
        return {n: float(getattr(self, n).detach()) for n in names}


def compose_joint_total(parts: dict, w: LossWeights):
    """Weighted sum used for ``JointLossBreakdown.total``; also usable on plain floats."""
    return (
        w.ortho * parts["ortho"]
        + w.div * parts["div"]
        + w.recon * (parts["recon_ts"] + parts["recon_cs"])
        + w.commit * (parts["commit_ts"] + parts["codebook_ts"] + parts["commit_cs"] + parts["codebook_cs"])
    )


def joint_loss(
    ts: BranchOutput | None,
    cs: BranchOutput | None,
    codebooks: list[Codebook],
    weights: LossWeights,
) -> JointLossBreakdown:
    """Reconstruction + quantization objective over both branches.

    A missing branch (ablation) contributes exact zeros. ``codebooks`` lists
    the codebooks of the enabled branches, in the order ts, cs.
    """
    ref = next(b.recon_loss for b in (ts, cs) if b is not None) if (ts or cs) else torch.tensor(0.0)
    zero = torch.zeros((), dtype=ref.dtype)

    def pick(branch, attr):
        if branch is None:
            return zero
        return branch.recon_loss if attr == "recon" else getattr(branch.outcome, attr)

    usages = [b.outcome.usage() for b in (ts, cs) if b is not None]
    parts = {
        "ortho": sum((orthogonality_loss(cb) for cb in codebooks), zero),
        "div": diversity_loss(usages) if usages else zero,
        "recon_ts": pick(ts, "recon"),
        "recon_cs": pick(cs, "recon"),
        "commit_ts": pick(ts, "commitment_term"),
        "commit_cs": pick(cs, "commitment_term"),
        "codebook_ts": pick(ts, "codebook_term"),
        "codebook_cs": pick(cs, "codebook_term"),
    }
    return JointLossBreakdown(**parts, total=compose_joint_total(parts, weights), weights=weights)


class DualAutoencoder(nn.Module):
    def __init__(self, cfg: StormConfig):
        super().__init__()
        self.cfg = cfg
        self.ts = Branch("ts", cfg, cfg.K_ts) if cfg.use_ts else None
        self.cs = Branch("cs", cfg, cfg.K_cs) if cfg.use_cs else None

    def forward_branch(self, x: torch.Tensor, branch: str) -> BranchOutput:
        module = {"ts": self.ts, "cs": self.cs}.get(branch, "missing")
        if module == "missing":
            raise ConfigError(f"unknown branch {branch!r}")
        if module is None:
            raise ConfigError(f"branch {branch!r} is disabled by ablation {self.cfg.ablation!r}")
        return module(x)

    def codebooks(self) -> list[Codebook]:
        return [b.codebook for b in (self.ts, self.cs) if b is not None]

    def forward(self, x: torch.Tensor) -> tuple[BranchOutput | None, BranchOutput | None, JointLossBreakdown]:
        ts = self.ts(x) if self.ts is not None else None
        cs = self.cs(x) if self.cs is not None else None
        return ts, cs, joint_loss(ts, cs, self.codebooks(), self.cfg.weights)
