"""Feature fusion, contrastive alignment and prior-posterior factor learning.

Shapes carry a leading batch axis ``B``; ``N`` is the number of stocks,
``H`` the branch width, ``H' = 2H`` the per-stock factor-embedding width and
``K_f`` the number of latent factors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ModeError
from .sequence import MultiHeadAttention, softmax

SIGMA_FLOOR = 1e-6


@dataclass
class FusedEmbedding:
    z_e_x: torch.Tensor  # (B, N, H')
    ts_pooled: torch.Tensor | None  # (B, H)
    cs_pooled: torch.Tensor | None  # (B, H)
    ts_stock: torch.Tensor | None = None  # (B, N, H) per-stock TS summary before fusion


@dataclass
class FactorDistribution:
    mu: torch.Tensor  # (B, K_f)
    sigma: torch.Tensor  # (B, K_f), > 0
    kind: str  # "prior" | "posterior"


@dataclass
class ExposureSet:
    alpha: torch.Tensor  # (B, N)
    beta: torch.Tensor  # (B, N, K_f)


@dataclass
class ReturnPrediction:
    y_hat: torch.Tensor  # (B, N)
    z_used: torch.Tensor  # (B, K_f)
    kind: str


def append_cls(z_e: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    """Prepend quantized tokens as CLS tokens: ``[z_q; z_e]`` along the token axis."""
    return torch.cat([z_q, z_e], dim=-2)


def strip_cls(tokens: torch.Tensor, n_cls: int) -> torch.Tensor:
    return tokens[..., n_cls:, :]


class CrossAttention(nn.Module):
    """Residual cross-attention of query tokens over a context set (CrossViT-style, no MLP)."""

    def __init__(self, H: int, heads: int):
        super().__init__()
        self.ln_q = nn.LayerNorm(H)
        self.ln_kv = nn.LayerNorm(H)
        self.attn = MultiHeadAttention(H, heads)

    def forward(self, q: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        return q + self.attn(self.ln_q(q), self.ln_kv(context))

    def zero_(self) -> None:
        with torch.no_grad():
            self.attn.out.weight.zero_()
            self.attn.out.bias.zero_()


class Fusion(nn.Module):
    """Exchange information between the TS and CS token sets.

    Each stock's pooled TS token queries the CS tokens and the pooled CS
    summary queries all TS tokens, for ``layers`` rounds. The per-stock
    embedding is ``[fused TS token of the stock ; fused CS summary]``.

    With one branch ablated the survivor passes through: without CS the
    summary half is the mean TS token; without TS a linear read-out splits
    each CS token into per-stock slices (averaged over days) to keep the
    embedding stock-specific.
    """

    def __init__(self, H: int, heads: int, layers: int, n_stocks: int, use_ts: bool = True, use_cs: bool = True):
        super().__init__()
        self.H, self.n_stocks = H, n_stocks
        self.use_ts, self.use_cs = use_ts, use_cs
        both = use_ts and use_cs
        self.ts_queries = nn.ModuleList(CrossAttention(H, heads) for _ in range(layers if both else 0))
        self.cs_queries = nn.ModuleList(CrossAttention(H, heads) for _ in range(layers if both else 0))
        self.cs_readout = nn.Linear(H, n_stocks * H) if (use_cs and not use_ts) else None

    def zero_cross_attention_(self) -> None:
        for layer in list(self.ts_queries) + list(self.cs_queries):
            layer.zero_()

    def forward(self, ts_tokens: torch.Tensor | None, cs_tokens: torch.Tensor | None) -> FusedEmbedding:
        """``ts_tokens``: (B, N, L_ts, H) per-stock sequences; ``cs_tokens``: (B, L_cs, H)."""
        if ts_tokens is not None and cs_tokens is not None:
            B, N, L, H = ts_tokens.shape
            ts_stock = ts_tokens.mean(-2)
            cs_sum = cs_tokens.mean(-2, keepdim=True)
            ts_flat = ts_tokens.reshape(B, N * L, H)
            q_ts, q_cs = ts_stock, cs_sum
            for ts_layer, cs_layer in zip(self.ts_queries, self.cs_queries):
                q_ts, q_cs = ts_layer(q_ts, cs_tokens), cs_layer(q_cs, ts_flat)
            z = torch.cat([q_ts, q_cs.expand(B, N, H)], dim=-1)
            return FusedEmbedding(z, q_ts.mean(1), q_cs[:, 0], ts_stock)
        if ts_tokens is not None:
            ts_stock = ts_tokens.mean(-2)
            summary = ts_stock.mean(1, keepdim=True).expand_as(ts_stock)
            return FusedEmbedding(torch.cat([ts_stock, summary], dim=-1), ts_stock.mean(1), None, ts_stock)
        if cs_tokens is not None:
            B, L, H = cs_tokens.shape
            per_stock = self.cs_readout(cs_tokens).reshape(B, L, self.n_stocks, H).mean(1)
            cs_sum = cs_tokens.mean(-2)
            z = torch.cat([per_stock, cs_sum[:, None].expand(B, self.n_stocks, H)], dim=-1)
            return FusedEmbedding(z, None, cs_sum, None)
        raise ValueError("fusion needs at least one token set")


def contrastive_loss(ts_pooled: torch.Tensor, cs_pooled: torch.Tensor, temperature) -> torch.Tensor:
    """Symmetric InfoNCE over the ``B x B`` cosine-similarity matrix; positives on the diagonal.

    A batch of one has no negatives and is defined as 0.
    """
    B = ts_pooled.shape[0]
    if B < 2:
        return ts_pooled.sum() * 0.0
    a = F.normalize(ts_pooled, dim=-1)
    b = F.normalize(cs_pooled, dim=-1)
    logits = a @ b.T / temperature
    target = torch.arange(B, device=logits.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


class _AttentionPool(nn.Module):
    """``K_f`` learned queries pool the stock axis into Gaussian parameters per factor."""

    def __init__(self, dim: int, K_f: int):
        super().__init__()
        self.queries = nn.Parameter(torch.randn(K_f, dim) / math.sqrt(dim))
        self.key = nn.Linear(dim, dim)
        self.mu_w = nn.Parameter(torch.randn(K_f, dim) / math.sqrt(dim))
        self.mu_b = nn.Parameter(torch.zeros(K_f))
        self.sigma_w = nn.Parameter(torch.randn(K_f, dim) / math.sqrt(dim))
        self.sigma_b = nn.Parameter(torch.zeros(K_f))

    def forward(self, keys_from: torch.Tensor, values: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        k = self.key(keys_from)  # (B, N, dim)
        att = softmax(torch.einsum("kd,bnd->bkn", self.queries, k) / math.sqrt(k.shape[-1]), dim=-1)
        pooled = torch.einsum("bkn,bnd->bkd", att, values)
        mu = (pooled * self.mu_w).sum(-1) + self.mu_b
        sigma = F.softplus((pooled * self.sigma_w).sum(-1) + self.sigma_b) + SIGMA_FLOOR
        return mu, sigma


class FactorPrior(nn.Module):
    """Prior factor distribution from embeddings alone; there is no label input."""

    def __init__(self, dim: int, K_f: int):
        super().__init__()
        self.value = nn.Linear(dim, dim)
        self.pool = _AttentionPool(dim, K_f)

    def forward(self, fused: FusedEmbedding) -> FactorDistribution:
        z = fused.z_e_x
        mu, sigma = self.pool(z, self.value(z))
        return FactorDistribution(mu, sigma, "prior")


class FactorPosterior(nn.Module):
    """Posterior factor distribution from labels and embeddings; training mode only.

    Each stock's label is embedded by a ``1 -> H'`` affine map, concatenated
    with its embedding and projected back to ``H'``; the attention pool then
    aggregates stocks into per-factor statistics.
    """

    def __init__(self, dim: int, K_f: int):
        super().__init__()
        self.label_embed = nn.Linear(1, dim)
        self.combine = nn.Linear(2 * dim, dim)
        self.pool = _AttentionPool(dim, K_f)

    def forward(self, y: torch.Tensor, fused: FusedEmbedding) -> FactorDistribution:
        if not self.training:
            raise ModeError("the posterior consumes future returns and is unavailable at inference")
        z = fused.z_e_x
        h = self.combine(torch.cat([self.label_embed(y[..., None]), z], dim=-1))
        mu, sigma = self.pool(z, h)
        return FactorDistribution(mu, sigma, "posterior")


def kl_divergence(post: FactorDistribution, prior: FactorDistribution) -> torch.Tensor:
    """Closed-form ``KL(post || prior)`` of diagonal Gaussians, summed over factors (and averaged over the batch)."""
    var_q, var_p = post.sigma**2, prior.sigma**2
    kl = torch.log(prior.sigma / post.sigma) + (var_q + (post.mu - prior.mu) ** 2) / (2.0 * var_p) - 0.5
    return kl.sum(-1).mean()


def sample_factors(
    dist: FactorDistribution,
    mode: str = "sample",
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Reparameterised ``mu + sigma * u`` (``mode='sample'``) or ``mu`` (``mode='mean'``)."""
    if mode == "mean":
        return dist.mu
    if mode != "sample":
        raise ValueError(f"unknown sampling mode {mode!r}")
    if noise is None:
        noise = torch.randn(dist.mu.shape, generator=generator, dtype=dist.mu.dtype)
    return dist.mu + dist.sigma * noise


class ReturnPredictor(nn.Module):
    """``y_hat = alpha + beta @ z`` with affine ``alpha``/``beta`` heads on the per-stock embeddings."""

    def __init__(self, dim: int, K_f: int):
        super().__init__()
        self.alpha = nn.Linear(dim, 1)
        self.beta = nn.Linear(dim, K_f)

    def exposures(self, fused: FusedEmbedding) -> ExposureSet:
        z = fused.z_e_x
        return ExposureSet(self.alpha(z)[..., 0], self.beta(z))

    def forward(self, fused: FusedEmbedding, z: torch.Tensor, kind: str = "prior") -> ReturnPrediction:
        return predict_returns(self.exposures(fused), z, kind)


def predict_returns(exp: ExposureSet, z: torch.Tensor, kind: str = "prior") -> ReturnPrediction:
    y_hat = exp.alpha + torch.einsum("...nk,...k->...n", exp.beta, z)
    return ReturnPrediction(y_hat, z, kind)


def prediction_loss(y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean squared error over stocks (and batch)."""
    return ((y_hat - y) ** 2).mean()


class FactorModule(nn.Module):
    def __init__(self, H: int, K_f: int, n_stocks: int, layers: int = 1, heads: int = 4,
                 use_ts: bool = True, use_cs: bool = True):
        super().__init__()
        dim = 2 * H
        self.fusion = Fusion(H, heads, layers, n_stocks, use_ts, use_cs)
        self.prior = FactorPrior(dim, K_f)
        self.posterior = FactorPosterior(dim, K_f)
        self.predictor = ReturnPredictor(dim, K_f)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1.0 / 0.07)))

    @property
    def temperature(self) -> torch.Tensor:
        return 1.0 / self.logit_scale.clamp(max=math.log(100.0)).exp()
