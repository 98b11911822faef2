"""Codebooks, nearest-neighbour quantization and codebook regularizers.

Quantization uses the straight-through rule: the forward value is the
nearest codebook entry, the backward pass copies the gradient arriving at
the quantized tokens onto the continuous tokens. Codebook entries are only
trained through the codebook term ``||sg[z_e] - z_q||^2`` (plus the
orthogonality and diversity regularizers).
"""

from __future__ import annotations

import contextlib
import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError

# -- stop-gradient -----------------------------------------------------------

_frozen: list | None = None
_frozen_pos = 0
_recording = False


def sg(x: torch.Tensor) -> torch.Tensor:
    """Stop-gradient.

    Inside :func:`frozen_stop_gradients` the value returned for the n-th call
    is the one recorded on the first pass, which turns the surrogate
    objective into an ordinary function of the parameters for finite
    differences.
    """
    global _frozen_pos
    if _frozen is None:
        return x.detach()
    if _recording:
        _frozen.append(x.detach().clone())
        return _frozen[-1]
    val = _frozen[_frozen_pos]
    _frozen_pos += 1
    return val


@contextlib.contextmanager
def frozen_stop_gradients():
    """Record ``sg`` values on the first call of ``replay`` and reuse them afterwards.

    Usage::

        with frozen_stop_gradients() as replay:
            base = replay(loss_fn)   # records
            bumped = replay(loss_fn) # reuses recorded values
    """
    global _frozen, _recording, _frozen_pos
    _frozen, _frozen_pos = [], 0
    state = {"recorded": False}

    def replay(fn):
        global _recording, _frozen_pos
        _recording = not state["recorded"]
        _frozen_pos = 0
        try:
            return fn()
        finally:
            state["recorded"] = True
            _recording = False

    try:
        yield replay
    finally:
        _frozen, _recording, _frozen_pos = None, False, 0


# -- codebook ----------------------------------------------------------------


class Codebook(nn.Module):
    """``K`` learnable entries of width ``H``, initialised ``U(-1/K, 1/K)``."""

    def __init__(self, K: int, H: int, name: str = "ts"):
        super().__init__()
        if K < 2:
            raise ConfigError("codebook needs at least 2 entries")
        self.K, self.H, self.name = K, H, name
        self.entries = nn.Parameter(torch.empty(K, H).uniform_(-1.0 / K, 1.0 / K))


@dataclass
class QuantizationOutcome:
    indices: torch.Tensor  # (M,) long
    quantized: torch.Tensor  # (M, H), straight-through
    commitment_term: torch.Tensor  # mean_m ||sg[z_q] - z_e||^2
    codebook_term: torch.Tensor  # mean_m ||sg[z_e] - z_q||^2
    soft_assign: torch.Tensor  # (M, K)

    def usage(self, K: int | None = None) -> UsageStats:
        K = K or self.soft_assign.shape[-1]
        counts = torch.bincount(self.indices.reshape(-1), minlength=K)
        return UsageStats(counts, self.soft_assign.reshape(-1, K).mean(0))


@dataclass
class UsageStats:
    counts: torch.Tensor  # (K,) hard tallies
    p_bar: torch.Tensor  # (K,) batch-averaged soft assignment

    @property
    def dead_fraction(self) -> float:
        return float((self.counts == 0).double().mean())


def _exact_sq_dist(z: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    """``(M, K)`` squared distances accumulated coordinate by coordinate.

    Same operation order as a plain sequential scan, so ties and near-ties
    resolve exactly as they would in a brute-force loop (no norm expansion,
    no square root).
    """
    zt, et = z.T.contiguous(), entries.T.contiguous()
    d = (zt[0, :, None] - et[0, None, :]).square_()
    buf = torch.empty_like(d)
    for h in range(1, zt.shape[0]):
        torch.sub(zt[h, :, None], et[h, None, :], out=buf)
        d.add_(buf.square_())
    return d


class _StraightThrough(torch.autograd.Function):
    """Forward returns the codebook lookup bitwise; backward copies the gradient to the tokens."""

    @staticmethod
    def forward(ctx, z_e, z_q):
        return z_q.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def nearest_codes(z: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    """Row-wise ``argmin_k ||z - e_k||^2``; ties go to the lowest index."""
    with torch.no_grad():
        return _exact_sq_dist(z.reshape(-1, z.shape[-1]), entries).argmin(-1).reshape(z.shape[:-1])


def nearest_code(z, codebook: Codebook | torch.Tensor) -> int:
    entries = codebook.entries if isinstance(codebook, Codebook) else torch.as_tensor(codebook)
    z = torch.as_tensor(z, dtype=entries.dtype)
    return int(nearest_codes(z[None], entries)[0])


def quantize(
    tokens: torch.Tensor,
    codebook: Codebook | torch.Tensor,
    temperature: float = 1.0,
    bypass: bool = False,
) -> QuantizationOutcome:
    """Quantize ``(..., H)`` tokens against a codebook.

    With ``bypass`` the continuous tokens are passed on unchanged (a plain
    autoencoder), while indices, losses and soft assignments are still
    reported.
    """
    entries = codebook.entries if isinstance(codebook, Codebook) else codebook
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    if not torch.isfinite(tokens).all():
        raise DataError("non-finite tokens passed to the quantizer")
    flat = tokens.reshape(-1, tokens.shape[-1])
    idx = nearest_codes(flat, entries)
    z_q = entries[idx]

    commitment = ((sg(z_q) - flat) ** 2).sum(-1).mean()
    codebook_term = ((sg(flat) - z_q) ** 2).sum(-1).mean()
    if bypass:
        quantized = flat
    elif _frozen is not None:
        # z_e + sg(z_q - z_e): same value and gradient, and with frozen offsets a
        # plain function of z_e whose finite differences match the straight-through rule
        quantized = flat + sg(z_q - flat)
    else:
        quantized = _StraightThrough.apply(flat, sg(z_q))

    d2 = (flat**2).sum(-1, keepdim=True) - 2.0 * flat @ entries.T + (entries**2).sum(-1)[None]
    soft = torch.softmax(-d2 / temperature, dim=-1)
    lead = tokens.shape[:-1]
    return QuantizationOutcome(
        indices=idx.reshape(lead),
        quantized=quantized.reshape(tokens.shape),
        commitment_term=commitment,
        codebook_term=codebook_term,
        soft_assign=soft.reshape(*lead, entries.shape[0]),
    )


# -- regularizers ------------------------------------------------------------


def _plogp(p: torch.Tensor) -> torch.Tensor:
    safe = torch.where(p > 0, p, torch.ones_like(p))
    return torch.where(p > 0, p * torch.log(safe), torch.zeros_like(p))


def diversity_loss(stats: Sequence[UsageStats | torch.Tensor]) -> torch.Tensor:
    """``(1 / GK) * sum_g sum_k p_bar log p_bar``.

    The value is <= 0 and most negative at uniform usage, so minimizing it
    spreads assignments over the codebook. ``0 log 0`` is taken as 0. When
    codebook sizes differ, each codebook is normalised by its own ``K``
    (identical to the formula above for equal sizes).
    """
    pbars = [s.p_bar if isinstance(s, UsageStats) else torch.as_tensor(s) for s in stats]
    if not pbars:
        raise ConfigError("diversity_loss needs at least one codebook")
    return sum(_plogp(p).sum() / p.shape[-1] for p in pbars) / len(pbars)


def orthogonality_loss(codebook: Codebook | torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """``(1 / K^2) * ||l2(e) l2(e)^T - I||_F^2``; ``eps`` is added to each norm."""
    e = codebook.entries if isinstance(codebook, Codebook) else codebook
    K = e.shape[0]
    unit = e / (e.norm(dim=-1, keepdim=True) + eps)
    gram = unit @ unit.T
    eye = torch.eye(K, dtype=e.dtype, device=e.device)
    return ((gram - eye) ** 2).sum() / K**2


# -- usage histogram ---------------------------------------------------------


@dataclass
class UsageHistogram:
    bucket: int
    counts: np.ndarray  # (ceil(K / bucket),)
    dead_fraction: float
    K: int

    @property
    def bucket_starts(self) -> np.ndarray:
        return np.arange(len(self.counts)) * self.bucket

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["bucket_start", "count"])
            for start, count in zip(self.bucket_starts, self.counts):
                w.writerow([int(start), int(count)])


def usage_histogram(indices, K: int, bucket: int = 5) -> UsageHistogram:
    """Tally code ids into ``ceil(K / bucket)`` consecutive buckets."""
    ids = np.asarray(indices if not isinstance(indices, torch.Tensor) else indices.cpu().numpy()).reshape(-1)
    ids = ids.astype(np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= K):
        raise DataError(f"code ids must lie in [0, {K})")
    per_code = np.bincount(ids, minlength=K)
    n_buckets = math.ceil(K / bucket)
    padded = np.zeros(n_buckets * bucket, dtype=np.int64)
    padded[:K] = per_code
    return UsageHistogram(bucket, padded.reshape(n_buckets, bucket).sum(1), float((per_code == 0).mean()), K)


def usage_entropy(indices, K: int) -> float:
    """Shannon entropy (nats) of the empirical hard-assignment distribution."""
    ids = np.asarray(indices if not isinstance(indices, torch.Tensor) else indices.cpu().numpy()).reshape(-1)
    counts = np.bincount(ids.astype(np.int64), minlength=K).astype(np.float64)
    if counts.sum() == 0:
        return 0.0
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())
