"""Single-asset trading MDP with observations built from model embeddings.

Actions are all-in / all-out: ``BUY`` converts all cash into shares at the
current close (less cost), ``SELL`` liquidates the whole position (less
cost) and ``HOLD`` leaves the account untouched. The reward of a step is the
relative change of account value across the step's price move.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, DataError
from .market_data import FeaturePanel, NormStats
from .model import Storm

BUY, HOLD, SELL = 0, 1, 2
ACTION_NAMES = ("buy", "hold", "sell")
ACCOUNT_FEATURES = 2  # position flag, cash / value


@dataclass
class EnvState:
    t: int
    observation: np.ndarray
    position: float  # shares m
    cash: float  # c
    value: float  # v = p_t * m + c


@dataclass
class EnvConfig:
    cost_ratio: float = 1e-4
    initial_cash: float = 1e6

    def __post_init__(self):
        if self.cost_ratio < 0 or self.initial_cash <= 0:
            raise ConfigError("cost_ratio must be >= 0 and initial_cash > 0")


@dataclass
class StepRecord:
    t: int
    action: int
    price: float
    position: float
    cash: float
    value: float
    reward: float


class TradingEnv:
    """One stock over ``[start, end]`` of a price series.

    ``market_features`` is a ``(T, F)`` array aligned with ``prices`` whose
    row ``t`` may use data up to and including day ``t``. An episode takes
    ``end - start`` steps; step ``t`` trades at ``prices[t]`` and is valued at
    ``prices[t + 1]``.
    """

    def __init__(
        self,
        prices: Sequence[float],
        market_features: np.ndarray | None = None,
        cfg: EnvConfig | None = None,
        start: int = 0,
        end: int | None = None,
    ):
        self.prices = np.asarray(prices, dtype=np.float64)
        if self.prices.ndim != 1 or self.prices.size < 2:
            raise DataError("need a 1-d price series with at least 2 points")
        if not (np.isfinite(self.prices).all() and (self.prices > 0).all()):
            raise DataError("prices must be finite and positive")
        T = self.prices.size
        feats = np.zeros((T, 0)) if market_features is None else np.asarray(market_features, dtype=np.float64)
        if feats.shape[0] != T:
            raise DataError(f"market features have {feats.shape[0]} rows for {T} prices")
        self.features = feats
        self.cfg = cfg or EnvConfig()
        self.start = start
        self.end = T - 1 if end is None else end
        if not 0 <= self.start < self.end <= T - 1:
            raise ConfigError(f"episode [{self.start}, {self.end}] does not fit {T} prices")
        self.log: list[StepRecord] = []
        self.state: EnvState | None = None

    @property
    def obs_dim(self) -> int:
        return self.features.shape[1] + ACCOUNT_FEATURES

    @property
    def n_steps(self) -> int:
        return self.end - self.start

    def _observe(self, t: int, m: float, c: float) -> np.ndarray:
        v = self.prices[t] * m + c
        account = np.array([1.0 if m > 0 else 0.0, c / v if v > 0 else 0.0])
        return np.concatenate([self.features[t], account])

    def reset(self, start: int | None = None) -> np.ndarray:
        if start is not None:
            if not 0 <= start < self.end:
                raise ConfigError(f"start {start} outside episode")
            self.start = start
        t, c = self.start, self.cfg.initial_cash
        self.state = EnvState(t, self._observe(t, 0.0, c), 0.0, c, c)
        self.log = []
        return self.state.observation

    def step(self, action: int) -> tuple[np.ndarray, float, bool, dict]:
        s = self.state
        if s is None:
            raise ConfigError("call reset() before step()")
        if s.t >= self.end:
            raise ConfigError("episode is over; call reset()")
        if action not in (BUY, HOLD, SELL):
            raise ConfigError(f"invalid action {action!r}")
        p = self.prices[s.t]
        m, c = s.position, s.cash
        v_pre = p * m + c
        fee = self.cfg.cost_ratio
        if action == BUY and c > 0:
            notional = c / (1.0 + fee)  # cost is paid out of the cash being converted
            m += notional / p
            c = 0.0
        elif action == SELL and m > 0:
            c += m * p * (1.0 - fee)
            m = 0.0
        t = s.t + 1
        p_next = self.prices[t]
        v_post = p_next * m + c
        reward = (v_post - v_pre) / v_pre
        done = t >= self.end or v_post <= 0
        self.state = EnvState(t, self._observe(t, m, c), m, c, v_post)
        self.log.append(StepRecord(s.t, int(action), float(p), m, c, v_post, reward))
        return self.state.observation, reward, done, {"value": v_post}

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "action", "price", "position", "cash", "value", "reward"])
            for r in self.log:
                nums = (r.price, r.position, r.cash, r.value, r.reward)
                w.writerow([r.t, ACTION_NAMES[r.action], *(repr(float(x)) for x in nums)])


def buy_and_hold_value(prices: Sequence[float], cfg: EnvConfig | None = None, start: int = 0,
                       end: int | None = None) -> float:
    """Terminal value of buying at ``prices[start]`` and holding to ``prices[end]``."""
    cfg = cfg or EnvConfig()
    prices = np.asarray(prices, dtype=np.float64)
    end = prices.size - 1 if end is None else end
    shares = cfg.initial_cash / (1.0 + cfg.cost_ratio) / prices[start]
    return float(shares * prices[end])


# -- observations from a trained model ---------------------------------------


@dataclass
class ObservationLayout:
    cs: slice
    ts: slice
    account: slice
    dim: int


class ObservationBuilder:
    """Embedding blocks for one traded stock from a trained model.

    The observation at day ``t`` concatenates the cross-sectional summary of
    the window ending at ``t``, the traded stock's time-series embedding of
    that window (taken before cross-branch fusion, so it depends on that
    stock's features only) and the account features.
    """

    def __init__(self, model: Storm, panel: FeaturePanel, norm_stats: NormStats | None = None):
        self.model = model
        self.panel = panel
        self.stats = norm_stats
        self.W = model.cfg.W
        self.H = model.cfg.H
        if panel.N != model.cfg.n_stocks or panel.D != model.cfg.n_features:
            raise DataError(
                f"panel is {panel.N} stocks x {panel.D} features but the model expects "
                f"{model.cfg.n_stocks} x {model.cfg.n_features}"
            )

    @property
    def layout(self) -> ObservationLayout:
        H = self.H
        return ObservationLayout(slice(0, H), slice(H, 2 * H), slice(2 * H, 2 * H + ACCOUNT_FEATURES),
                                 2 * H + ACCOUNT_FEATURES)

    @property
    def first_day(self) -> int:
        return self.W - 1

    def _windows(self, days: Sequence[int]) -> torch.Tensor:
        vals = self.panel.values
        out = []
        for t in days:
            if not self.first_day <= t < self.panel.T:
                raise DataError(f"day {t} needs {self.W} rows of history within [0, {self.panel.T})")
            w = vals[t - self.W + 1 : t + 1]
            out.append(self.stats.apply(w) if self.stats is not None else w)
        return torch.as_tensor(np.stack(out), dtype=torch.float32)

    def ticker_index(self, ticker: str) -> int:
        try:
            return list(self.panel.tickers).index(ticker)
        except ValueError:
            raise DataError(f"unknown ticker {ticker!r}") from None

    @torch.no_grad()
    def market_block(self, ticker: str, days: Sequence[int], batch_size: int = 64) -> np.ndarray:
        """``(len(days), 2H)`` rows of ``[CS summary ; TS embedding of ticker]``."""
        i = self.ticker_index(ticker)
        was = self.model.training
        self.model.eval()
        rows = []
        try:
            days = list(days)
            for s in range(0, len(days), batch_size):
                fused = self.model.embed(self._windows(days[s : s + batch_size]))
                B = fused.z_e_x.shape[0]
                cs = fused.cs_pooled if fused.cs_pooled is not None else torch.zeros(B, self.H)
                ts = fused.ts_stock[:, i] if fused.ts_stock is not None else torch.zeros(B, self.H)
                rows.append(torch.cat([cs, ts], dim=-1).double().numpy())
        finally:
            self.model.train(was)
        return np.concatenate(rows) if rows else np.zeros((0, 2 * self.H))

    def observation(self, ticker: str, t: int, position: float = 0.0, cash_ratio: float = 1.0) -> np.ndarray:
        block = self.market_block(ticker, [t])[0]
        return np.concatenate([block, [1.0 if position > 0 else 0.0, cash_ratio]])


def build_observation(
    model: Storm, panel: FeaturePanel, ticker: str, t: int, norm_stats: NormStats | None = None,
    position: float = 0.0, cash_ratio: float = 1.0,
) -> np.ndarray:
    return ObservationBuilder(model, panel, norm_stats).observation(ticker, t, position, cash_ratio)


def make_env(
    model: Storm, panel: FeaturePanel, ticker: str, start: int, end: int | None = None,
    norm_stats: NormStats | None = None, cfg: EnvConfig | None = None,
) -> TradingEnv:
    """Environment over ``[start, end]`` of ``panel`` with model-embedding observations."""
    builder = ObservationBuilder(model, panel, norm_stats)
    end = panel.T - 1 if end is None else end
    start = max(start, builder.first_day)
    feats = np.zeros((panel.T, 2 * model.cfg.H))
    days = list(range(start, end + 1))
    feats[start : end + 1] = builder.market_block(ticker, days)
    close = panel.feature("close")[:, builder.ticker_index(ticker)]
    return TradingEnv(close, feats, cfg, start, end)
