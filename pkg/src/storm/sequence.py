"""Patching for both branches and the pre-norm attention stacks they share.

Time-series (TS) patches hold ``p`` consecutive days of one stock; they are
ordered stock-major, so patch ``m = i * (W // p) + j`` covers days
``[j*p, (j+1)*p)`` of stock ``i``. Within a patch the ``(p, D)`` block is
flattened day-major. Cross-sectional (CS) patches hold all ``N`` stocks of
one day, flattened stock-major.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError


@dataclass
class PatchGrid:
    tokens: np.ndarray | torch.Tensor  # (M, P)
    axis: str  # "ts" | "cs"
    patch_shape: tuple[int, int, int]  # (days, stocks, D)
    origin: tuple[int, int, int]  # (W, N, D)

    @property
    def M(self) -> int:
        return self.tokens.shape[0]


@dataclass(frozen=True)
class AttentionConfig:
    layers: int = 4
    heads: int = 4
    H: int = 256
    mlp_ratio: float = 4.0
    dropout: float = 0.0

    def __post_init__(self):
        if self.H % self.heads:
            raise ConfigError(f"width {self.H} is not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")


# -- patching ----------------------------------------------------------------


def ts_patchify(x, p: int):
    """``(..., W, N, D) -> (..., N, W // p, p * D)``."""
    W, N, D = x.shape[-3:]
    if p < 1 or W % p:
        raise ConfigError(f"patch length {p} does not divide window length {W}")
    lead = x.shape[:-3]
    x = x.reshape(*lead, W // p, p, N, D)
    # (..., W/p, p, N, D) -> (..., N, W/p, p, D)
    nd = x.ndim
    perm = list(range(nd - 4)) + [nd - 2, nd - 4, nd - 3, nd - 1]
    x = x.transpose(perm) if isinstance(x, np.ndarray) else x.permute(perm)
    return x.reshape(*lead, N, W // p, p * D)


def ts_unpatchify(patches, p: int, D: int):
    """Inverse of :func:`ts_patchify`."""
    N, n_blocks = patches.shape[-3:-1]
    lead = patches.shape[:-3]
    x = patches.reshape(*lead, N, n_blocks, p, D)
    nd = x.ndim
    perm = list(range(nd - 4)) + [nd - 3, nd - 2, nd - 4, nd - 1]
    x = x.transpose(perm) if isinstance(x, np.ndarray) else x.permute(perm)
    return x.reshape(*lead, n_blocks * p, N, D)


def cs_patchify(x):
    """``(..., W, N, D) -> (..., W, N * D)``."""
    W, N, D = x.shape[-3:]
    return x.reshape(*x.shape[:-3], W, N * D)


def cs_unpatchify(patches, N: int, D: int):
    W = patches.shape[-2]
    return patches.reshape(*patches.shape[:-2], W, N, D)


def patch_time_series(window, p: int) -> PatchGrid:
    W, N, D = window.shape
    tokens = ts_patchify(window, p).reshape(N * (W // p), p * D)
    return PatchGrid(tokens, "ts", (p, 1, D), (W, N, D))


def patch_cross_section(window) -> PatchGrid:
    W, N, D = window.shape
    return PatchGrid(cs_patchify(window), "cs", (1, N, D), (W, N, D))


def ts_patch_index(t: int, i: int, d: int, W: int, p: int, D: int) -> tuple[int, int]:
    """(patch, offset) holding element ``x[t, i, d]`` under TS patching."""
    return i * (W // p) + t // p, (t % p) * D + d


def unpatch(grid: PatchGrid):
    W, N, D = grid.origin
    if grid.axis == "ts":
        p = grid.patch_shape[0]
        return ts_unpatchify(grid.tokens.reshape(N, W // p, p * D), p, D)
    if grid.axis == "cs":
        return cs_unpatchify(grid.tokens, N, D)
    raise ConfigError(f"unknown patch axis {grid.axis!r}")


# -- layers ------------------------------------------------------------------


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Explicit max-shifted softmax; faster than the fused CPU kernel on short rows."""
    e = (x - x.amax(dim, keepdim=True).detach()).exp()
    return e / e.sum(dim, keepdim=True)


class PatchEmbedding(nn.Module):
    """Affine projection of flattened patches plus a learned positional table."""

    def __init__(self, patch_dim: int, H: int, pos_shape: tuple[int, ...]):
        super().__init__()
        self.proj = nn.Linear(patch_dim, H)
        self.pos = nn.Parameter(torch.randn(*pos_shape, H) * 0.02)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        return self.proj(patches) + self.pos


class MultiHeadAttention(nn.Module):
    def __init__(self, H: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if H % heads:
            raise ConfigError(f"width {H} is not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(H, H)
        self.kv = nn.Linear(H, 2 * H)
        self.out = nn.Linear(H, H)
        self.dropout = dropout

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        context = x if context is None else context
        *lead, Lq, H = x.shape
        Lk = context.shape[-2]
        hd = H // self.heads
        q = self.q(x).reshape(*lead, Lq, self.heads, hd).transpose(-2, -3)
        k, v = self.kv(context).chunk(2, dim=-1)
        k = k.reshape(*lead, Lk, self.heads, hd).transpose(-2, -3)
        v = v.reshape(*lead, Lk, self.heads, hd).transpose(-2, -3)
        att = softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        att = F.dropout(att, self.dropout, self.training)
        y = (att @ v).transpose(-2, -3).reshape(*lead, Lq, H)
        return self.out(y)


class Block(nn.Module):
    """Pre-norm residual block: ``x + attn(ln(x))`` then ``x + mlp(ln(x))``."""

    def __init__(self, H: int, heads: int, mlp_ratio: float = 4.0, dropout: float = 0.0):
        super().__init__()
        hidden = int(round(H * mlp_ratio))
        self.ln1 = nn.LayerNorm(H)
        self.attn = MultiHeadAttention(H, heads, dropout)
        self.ln2 = nn.LayerNorm(H)
        self.fc1 = nn.Linear(H, hidden)
        self.fc2 = nn.Linear(hidden, H)
        self.dropout = dropout

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + F.dropout(self.attn(self.ln1(x)), self.dropout, self.training)
        h = self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x + F.dropout(h, self.dropout, self.training)

    def zero_residual_branches(self) -> None:
        with torch.no_grad():
            for lin in (self.attn.out, self.fc2):
                lin.weight.zero_()
                lin.bias.zero_()


class Encoder(nn.Module):
    """``cfg.layers`` pre-norm blocks; shape-preserving."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(
            Block(cfg.H, cfg.heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.layers)
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.cfg.H:
            raise ConfigError(f"token width {tokens.shape[-1]} != configured width {self.cfg.H}")
        for blk in self.blocks:
            tokens = blk(tokens)
        return tokens


class Decoder(nn.Module):
    """Attention stack followed by a projection back to flattened patches."""

    def __init__(self, cfg: AttentionConfig, patch_dim: int, pos_shape: tuple[int, ...]):
        super().__init__()
        self.cfg = cfg
        self.pos = nn.Parameter(torch.randn(*pos_shape, cfg.H) * 0.02)
        self.stack = Encoder(cfg)
        self.ln = nn.LayerNorm(cfg.H)
        self.head = nn.Linear(cfg.H, patch_dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        expect = tuple(self.pos.shape[:-1])
        if tuple(tokens.shape[-1 - len(expect) : -1]) != expect:
            raise ConfigError(f"decoder expects token layout {expect}, got {tuple(tokens.shape[:-1])}")
        return self.head(self.ln(self.stack(tokens + self.pos)))


def encode(tokens: torch.Tensor, encoder: Encoder) -> torch.Tensor:
    return encoder(tokens)


def decode(tokens: torch.Tensor, decoder: Decoder, grid_meta: PatchGrid) -> torch.Tensor:
    """Decode ``(M, H)`` tokens back to a ``(W, N, D)`` window."""
    if tokens.shape[0] != grid_meta.M:
        raise ConfigError(f"token count {tokens.shape[0]} does not match patch grid ({grid_meta.M})")
    patches = decoder(tokens.reshape(decoder.pos.shape))
    return unpatch(PatchGrid(patches.reshape(grid_meta.M, -1), grid_meta.axis, grid_meta.patch_shape, grid_meta.origin))
