"""TopK-Drop daily rebalancing with transaction costs and an exact trade ledger.

Execution convention: the signal of day ``t`` is traded at the close of day
``t`` and the portfolio is marked at the close of day ``t + 1``. Fractional
shares are allowed and there is no short selling.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError
from .evaluation import DailyPrediction, MetricsReport, build_report

DEFAULT_K = 5
DEFAULT_D = 3
DEFAULT_COST = 1e-4
DEFAULT_CASH = 1e6


@dataclass
class PortfolioState:
    holdings: dict[str, float] = field(default_factory=dict)  # ticker -> shares
    cash: float = DEFAULT_CASH
    value: float = DEFAULT_CASH

    def mark(self, prices: dict[str, float] | pd.Series) -> float:
        self.value = self.cash + sum(sh * float(prices[t]) for t, sh in self.holdings.items())
        return self.value

    def weights(self, tickers: Sequence[str], prices) -> np.ndarray:
        value = self.cash + sum(sh * float(prices[t]) for t, sh in self.holdings.items())
        return np.array([self.holdings.get(t, 0.0) * float(prices[t]) / value for t in tickers])


@dataclass
class Trade:
    date: str
    ticker: str
    side: str  # "buy" | "sell"
    shares: float
    price: float
    cost: float

    @property
    def notional(self) -> float:
        return self.shares * self.price


@dataclass
class DayRecord:
    date: str
    pre_value: float  # value at the close before trading
    post_value: float  # value right after trading (pre_value - costs)
    cash_before: float
    cash_after: float
    buys: float  # traded notional
    sells: float
    costs: float
    trades: list[Trade] = field(default_factory=list)


@dataclass
class TradeLedger:
    days: list[DayRecord] = field(default_factory=list)

    @property
    def trades(self) -> list[Trade]:
        return [t for d in self.days for t in d.trades]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["date", "ticker", "side", "shares", "price", "cost"])
            for t in self.trades:
                w.writerow([t.date, t.ticker, t.side, repr(float(t.shares)), repr(float(t.price)), repr(float(t.cost))])

    def identity_errors(self) -> list[float]:
        """Relative residual of ``cash_after = cash_before + sells - buys - costs`` per day."""
        out = []
        for d in self.days:
            resid = d.cash_before + d.sells - d.buys - d.costs - d.cash_after
            out.append(abs(resid) / max(d.pre_value, 1e-300))
        return out


# -- selection ---------------------------------------------------------------


def _rank_order(y_hat: np.ndarray, tickers: Sequence[str]) -> list[str]:
    """Tickers from best to worst; ties broken by ticker name."""
    return [tickers[i] for i in sorted(range(len(tickers)), key=lambda i: (-y_hat[i], tickers[i]))]


def topk_drop_select(prev_set: Iterable[str], y_hat, k: int, d: int, tickers: Sequence[str]) -> set[str]:
    """Target holdings for the day.

    An empty ``prev_set`` takes the top ``k`` outright. Otherwise up to ``d``
    times the worst-ranked held name is swapped for the best-ranked non-held
    name, stopping as soon as the newcomer does not outrank the incumbent.
    A held set smaller than ``k`` is first filled with the best non-held names
    (these fills do not count against ``d``).
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    N = len(tickers)
    if y_hat.shape != (N,):
        raise DataError(f"y_hat has shape {y_hat.shape}, expected ({N},)")
    if not 1 <= k <= N:
        raise ConfigError(f"k={k} must satisfy 1 <= k <= N={N}")
    if not 0 <= d <= k:
        raise ConfigError(f"d={d} must satisfy 0 <= d <= k={k}")
    order = _rank_order(y_hat, tickers)
    rank = {t: r for r, t in enumerate(order)}
    held = set(prev_set)
    unknown = held - set(tickers)
    if unknown:
        raise DataError(f"held tickers not in universe: {sorted(unknown)}")
    if not held:
        return set(order[:k])

    held_sorted = sorted(held, key=rank.__getitem__)
    while len(held_sorted) > k:  # universe shrank or k lowered
        held_sorted.pop()
    outside = [t for t in order if t not in held]
    while len(held_sorted) < k:
        held_sorted.append(outside.pop(0))
        held_sorted.sort(key=rank.__getitem__)

    for _ in range(d):
        if not outside:
            break
        worst, best = held_sorted[-1], outside[0]
        if rank[best] >= rank[worst]:
            break
        held_sorted[-1] = best
        outside.pop(0)
        held_sorted.sort(key=rank.__getitem__)
    return set(held_sorted)


# -- execution ---------------------------------------------------------------


def rebalance(
    state: PortfolioState, target_set: Iterable[str], prices, cost_ratio: float = DEFAULT_COST, date: str = ""
) -> tuple[PortfolioState, DayRecord]:
    """Sell names leaving the target, then spend the cash equally on the newcomers.

    Each newcomer receives ``cash / n_new`` including its cost, i.e. a buy
    notional of ``cash / (n_new * (1 + cost_ratio))``. Incumbents are not
    re-weighted, so an unchanged target trades nothing.
    """
    if cost_ratio < 0:
        raise ConfigError("cost_ratio must be non-negative")
    target = set(target_set)
    for t in target | set(state.holdings):
        p = float(prices[t]) if t in prices else float("nan")
        if not np.isfinite(p) or p <= 0:
            raise DataError(f"missing or non-positive price for {t} on {date}")

    pre_value = state.mark(prices)
    cash_before = state.cash
    holdings = dict(state.holdings)
    cash = state.cash
    trades, buys, sells, costs = [], 0.0, 0.0, 0.0

    for t in sorted(set(holdings) - target):
        sh, px = holdings.pop(t), float(prices[t])
        notional = sh * px
        cost = cost_ratio * notional
        cash += notional - cost
        sells += notional
        costs += cost
        trades.append(Trade(date, t, "sell", sh, px, cost))

    new = sorted(target - set(holdings))
    if new and cash > 0:
        budget = cash / len(new)
        for t in new:
            px = float(prices[t])
            notional = budget / (1.0 + cost_ratio)
            cost = cost_ratio * notional
            holdings[t] = notional / px
            cash -= notional + cost
            buys += notional
            costs += cost
            trades.append(Trade(date, t, "buy", notional / px, px, cost))
        if abs(cash) <= 1e-9 * max(pre_value, 1.0):
            cash = 0.0  # round-off after spending the whole budget
        if cash < 0:
            raise DataError(f"negative cash {cash} on {date}")

    out = PortfolioState(holdings, cash, 0.0)
    out.mark(prices)
    rec = DayRecord(date, pre_value, out.value, cash_before, cash, buys, sells, costs, trades)
    return out, rec


@dataclass
class BacktestConfig:
    k: int = DEFAULT_K
    d: int = DEFAULT_D
    cost_ratio: float = DEFAULT_COST
    cash: float = DEFAULT_CASH
    r_f: float = 0.0


@dataclass
class BacktestResult:
    daily_returns: np.ndarray
    ledger: TradeLedger
    report: MetricsReport
    equity: pd.Series  # value at each mark, indexed by date
    selections: list[set[str]]

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.ledger.to_csv(out / "ledger.csv")
        with open(out / "equity.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["date", "value"])
            for dt, v in self.equity.items():
                w.writerow([str(pd.Timestamp(dt).date()), repr(float(v))])
        self.report.to_json(out / "metrics.json")


def run_backtest(
    preds: Sequence[DailyPrediction], prices: pd.DataFrame, tickers: Sequence[str] | None = None,
    cfg: BacktestConfig | None = None,
) -> BacktestResult:
    """Daily TopK-Drop over ``preds``.

    ``prices`` holds closes indexed by date with one column per ticker and
    must contain every prediction date plus the following trading day.
    ``r_t = (v_{t+1} - v_t) / v_t`` where ``v_t`` is the value before trading
    on day ``t``, so costs of day ``t`` fall into ``r_t``.
    """
    cfg = cfg or BacktestConfig()
    tickers = list(tickers if tickers is not None else prices.columns)
    if not preds:
        raise DataError("no predictions to backtest")
    idx = pd.DatetimeIndex(prices.index)
    pos = {d: i for i, d in enumerate(idx)}
    columns = list(prices.columns)
    table = prices.to_numpy(dtype=np.float64)
    missing = set(tickers) - set(columns)
    if missing:
        raise DataError(f"no price column for {sorted(missing)}")
    state = PortfolioState({}, cfg.cash, cfg.cash)
    ledger = TradeLedger()
    values = [cfg.cash]
    dates = []
    selections = []
    prev: set[str] = set()
    for pred in preds:
        day = pd.Timestamp(pred.date)
        if day not in pos:
            raise DataError(f"no prices for prediction date {day.date()}")
        i = pos[day]
        if i + 1 >= len(idx):
            raise DataError(f"no next-day close after {day.date()} to mark the portfolio")
        today, nxt = dict(zip(columns, table[i])), dict(zip(columns, table[i + 1]))
        target = topk_drop_select(prev, pred.y_hat, cfg.k, cfg.d, tickers)
        state, rec = rebalance(state, target, today, cfg.cost_ratio, str(day.date()))
        ledger.days.append(rec)
        for t in state.holdings:
            if not np.isfinite(nxt[t]) or nxt[t] <= 0:
                raise DataError(f"missing price for held {t} on {idx[i + 1].date()}")
        values.append(state.mark(nxt))
        dates.append(idx[i + 1])
        prev = set(state.holdings)
        selections.append(set(target))

    v = np.asarray(values)
    r = v[1:] / v[:-1] - 1.0
    equity = pd.Series(v, index=[pd.Timestamp(preds[0].date)] + dates)
    report = build_report(preds, r, cfg.r_f)
    return BacktestResult(r, ledger, report, equity, selections)


def prices_frame(dates, tickers: Sequence[str], close: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame(np.asarray(close, dtype=np.float64), index=pd.DatetimeIndex(dates), columns=list(tickers))
