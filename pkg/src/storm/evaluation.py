"""Rank-correlation factor metrics and the wealth-curve financial metrics."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

TRADING_DAYS = 252


@dataclass
class DailyPrediction:
    date: np.datetime64 | str
    y_hat: np.ndarray  # (N,)
    y_true: np.ndarray  # (N,)

    def __post_init__(self):
        self.y_hat = np.asarray(self.y_hat, dtype=np.float64)
        self.y_true = np.asarray(self.y_true, dtype=np.float64)
        if self.y_hat.shape != self.y_true.shape or self.y_hat.ndim != 1:
            raise DataError("y_hat and y_true must be 1-d vectors of equal length")
        if not (np.isfinite(self.y_hat).all() and np.isfinite(self.y_true).all()):
            raise DataError(f"non-finite prediction or label on {self.date}")


@dataclass
class MetricsReport:
    rank_ic: float | None = None
    rank_icir: float | None = None
    apy: float | None = None
    cw: float | None = None
    cr: float | None = None
    asr: float | None = None
    mdd: float | None = None
    avo: float | None = None
    n_days: int = 0
    annualization: int = TRADING_DAYS

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


# -- rank correlation --------------------------------------------------------


def average_ranks(v: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    uniq, inverse, counts = np.unique(v, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    return (upper - (counts - 1) / 2.0)[inverse]


def _pearson_population(a: np.ndarray, b: np.ndarray) -> float | None:
    a = a - a.mean()
    b = b - b.mean()
    saa, sbb = float(a @ a), float(b @ b)
    if saa == 0.0 or sbb == 0.0:
        return None
    return float(a @ b) / math.sqrt(saa * sbb)


def rank_ic_day(pred: DailyPrediction) -> float:
    """Pearson correlation of average-tie ranks (Spearman's rho).

    All-tied vectors have no rank variance; the IC is then 0 and a warning is raised.
    """
    if pred.y_hat.size < 2:
        raise DataError("rank IC needs at least 2 stocks")
    ic = _pearson_population(average_ranks(pred.y_hat), average_ranks(pred.y_true))
    if ic is None:
        warnings.warn(f"zero rank variance on {pred.date}; rank IC set to 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return ic


def rank_ic_series(preds: Sequence[DailyPrediction]) -> tuple[float, float | None]:
    """Mean daily rank IC and its mean / population-std ratio (None when the std is 0)."""
    if not preds:
        raise DataError("no predictions")
    daily = np.array([rank_ic_day(p) for p in preds])
    return summarize_ic(daily)


def summarize_ic(daily: np.ndarray) -> tuple[float, float | None]:
    daily = np.asarray(daily, dtype=np.float64)
    mean = float(daily.mean())
    if daily.size < 2:
        return mean, None
    std = float(np.sqrt(((daily - mean) ** 2).mean()))
    # dispersion below float round-off of the mean counts as none
    if std <= 1e-15 * max(1.0, abs(mean)):
        return mean, None
    return mean, mean / std


def write_daily_ic(preds: Sequence[DailyPrediction], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "rank_ic"])
        for p in preds:
            w.writerow([str(p.date), repr(rank_ic_day(p))])


# -- wealth metrics ----------------------------------------------------------


def cumulative_wealth(daily_returns: Sequence[float]) -> np.ndarray:
    """Wealth curve starting at 1 (length ``n + 1``)."""
    r = np.asarray(daily_returns, dtype=np.float64)
    if (1.0 + r <= 0).any():
        raise DataError("every daily return must exceed -1")
    return np.concatenate([[1.0], np.cumprod(1.0 + r)])


def annualized_yield(cw: float, n_days: int, annualization: int = TRADING_DAYS) -> float:
    if n_days < 1:
        raise DataError("annualized yield needs at least one day")
    return float(cw ** (annualization / n_days) - 1.0)


def max_drawdown(wealth: Sequence[float]) -> float:
    """Largest peak-relative decline of a wealth curve, in ``[0, 1]``."""
    w = np.asarray(wealth, dtype=np.float64)
    peak = np.maximum.accumulate(w)
    return float(((peak - w) / peak).max())


def annualized_volatility(daily_returns: Sequence[float], annualization: int = TRADING_DAYS) -> float:
    r = np.asarray(daily_returns, dtype=np.float64)
    return float(np.sqrt(((r - r.mean()) ** 2).mean()) * math.sqrt(annualization))


def sharpe_ratio(apy: float, avo: float, r_f: float = 0.0) -> float | None:
    return None if avo == 0 else (apy - r_f) / avo


def calmar_ratio(apy: float, mdd: float) -> float | None:
    return None if mdd == 0 else apy / mdd


def wealth_metrics(
    daily_returns: Sequence[float], r_f: float = 0.0, annualization: int = TRADING_DAYS
) -> MetricsReport:
    """CW, APY, MDD, AVO, ASR and CR of a daily return stream."""
    r = np.asarray(daily_returns, dtype=np.float64)
    wealth = cumulative_wealth(r)
    cw = float(wealth[-1])
    apy = annualized_yield(cw, r.size, annualization)
    mdd = max_drawdown(wealth)
    avo = annualized_volatility(r, annualization)
    return MetricsReport(
        apy=apy,
        cw=cw,
        cr=calmar_ratio(apy, mdd),
        asr=sharpe_ratio(apy, avo, r_f),
        mdd=mdd,
        avo=avo,
        n_days=int(r.size),
        annualization=annualization,
    )


def build_report(
    preds: Sequence[DailyPrediction] | None,
    daily_returns: Sequence[float] | None,
    r_f: float = 0.0,
) -> MetricsReport:
    """Assemble factor and financial metrics into one report; either input may be omitted."""
    report = wealth_metrics(daily_returns, r_f) if daily_returns is not None and len(daily_returns) else MetricsReport()
    if preds:
        report.rank_ic, report.rank_icir = rank_ic_series(preds)
        if not report.n_days:
            report.n_days = len(preds)
    return report
