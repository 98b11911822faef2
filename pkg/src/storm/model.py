"""The complete model: dual VQ-VAE feeding the factor module."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .autoencoder import BranchOutput, DualAutoencoder, JointLossBreakdown
from .config import StormConfig
from .factor import (
    FactorDistribution,
    FactorModule,
    FusedEmbedding,
    append_cls,
    contrastive_loss,
    kl_divergence,
    prediction_loss,
    sample_factors,
)


def cs_zscore(y: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Standardise labels across stocks within each window."""
    mean = y.mean(-1, keepdim=True)
    std = ((y - mean) ** 2).mean(-1, keepdim=True).sqrt()
    return (y - mean) / (std + eps)


@dataclass
class StormOutput:
    ts: BranchOutput | None
    cs: BranchOutput | None
    joint: JointLossBreakdown
    fused: FusedEmbedding
    prior: FactorDistribution
    posterior: FactorDistribution | None
    y_hat: torch.Tensor  # posterior-path prediction in training, prior mean otherwise
    clip: torch.Tensor
    pred: torch.Tensor
    kl: torch.Tensor
    total: torch.Tensor

    def components(self) -> dict[str, float]:
        out = self.joint.as_floats()
        out["joint_total"] = out.pop("total")
        out.update(clip=self.clip.item(), pred=self.pred.item(), kl=self.kl.item(), total=self.total.item())
        return out


class Storm(nn.Module):
    def __init__(self, cfg: StormConfig):
        super().__init__()
        self.cfg = cfg
        self.autoencoder = DualAutoencoder(cfg)
        self.factor = FactorModule(
            cfg.H, cfg.K_f, cfg.n_stocks, cfg.fusion_layers, cfg.fusion_heads, cfg.use_ts, cfg.use_cs
        )

    # token sets handed to the factor module
    @staticmethod
    def _extended(ts: BranchOutput | None, cs: BranchOutput | None):
        ts_tok = append_cls(ts.z_e, ts.outcome.quantized) if ts is not None else None
        cs_tok = append_cls(cs.z_e, cs.outcome.quantized) if cs is not None else None
        return ts_tok, cs_tok

    def fuse(self, ts: BranchOutput | None, cs: BranchOutput | None) -> FusedEmbedding:
        return self.factor.fusion(*self._extended(ts, cs))

    def embed(self, x: torch.Tensor) -> FusedEmbedding:
        ts, cs, _ = self.autoencoder(x)
        return self.fuse(ts, cs)

    def forward(
        self,
        x: torch.Tensor,
        y: torch.Tensor | None = None,
        noise: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> StormOutput:
        """Full objective. ``y`` is required in training mode and ignored otherwise.

        ``x``: (B, W, N, D) normalised windows; ``y``: (B, N) next-day returns.
        """
        ts, cs, joint = self.autoencoder(x)
        fused = self.fuse(ts, cs)
        prior = self.factor.prior(fused)
        w = self.cfg.weights
        zero = joint.total.new_zeros(())

        if ts is not None and cs is not None:
            clip = contrastive_loss(fused.ts_pooled, fused.cs_pooled, self.factor.temperature)
        else:
            clip = zero

        posterior = None
        if self.training and y is not None:
            target = cs_zscore(y) if self.cfg.label_norm == "cs_zscore" else y
            posterior = self.factor.posterior(target, fused)
            z = sample_factors(posterior, "sample", generator=generator, noise=noise)
            y_hat = self.factor.predictor(fused, z, "posterior").y_hat
            pred = prediction_loss(y_hat, target)
            kl = kl_divergence(posterior, prior)
        else:
            y_hat = self.factor.predictor(fused, prior.mu, "prior").y_hat
            pred = kl = zero
            if y is not None:
                target = cs_zscore(y) if self.cfg.label_norm == "cs_zscore" else y
                pred = prediction_loss(y_hat, target)

        total = joint.total + w.clip * clip + w.pred * pred + w.kl * kl
        return StormOutput(ts, cs, joint, fused, prior, posterior, y_hat, clip, pred, kl, total)

    @torch.no_grad()
    def predict(self, x: torch.Tensor) -> torch.Tensor:
        """Inference path: prior mean -> return predictor. Never sees labels."""
        was = self.training
        self.eval()
        try:
            fused = self.embed(x)
            prior = self.factor.prior(fused)
            return self.factor.predictor(fused, sample_factors(prior, "mean"), "prior").y_hat
        finally:
            self.train(was)

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list] = {"ts": [], "cs": [], "factor": []}
        for name, p in self.named_parameters():
            if name.startswith("autoencoder.ts."):
                groups["ts"].append((name, p))
            elif name.startswith("autoencoder.cs."):
                groups["cs"].append((name, p))
            else:
                groups["factor"].append((name, p))
        return groups
