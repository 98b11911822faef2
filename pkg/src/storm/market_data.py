"""Bar ingestion, indicator features, windowing, normalization and synthetic panels."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError, InsufficientDataError, ParseError

logger = logging.getLogger(__name__)

RAW_FEATURES = ("open", "high", "low", "close", "volume")
CSV_COLUMNS = ("date", "ticker") + RAW_FEATURES


@dataclass(frozen=True)
class Bar:
    date: date
    ticker: str
    open: float
    high: float
    low: float
    close: float
    volume: float

    def violations(self) -> list[str]:
        problems = []
        prices = (self.open, self.high, self.low, self.close)
        if not all(math.isfinite(p) and p > 0 for p in prices):
            problems.append("prices must be positive and finite")
        if self.low > min(self.open, self.close):
            problems.append(f"low {self.low} > min(open, close)")
        if self.high < max(self.open, self.close):
            problems.append(f"high {self.high} < max(open, close)")
        if self.low > self.high:
            problems.append(f"low {self.low} > high {self.high}")
        if not (math.isfinite(self.volume) and self.volume >= 0):
            problems.append("volume must be non-negative")
        return problems


@dataclass
class FeaturePanel:
    """Aligned ``(date, stock, feature)`` array.

    ``values[t, i, d]`` is feature ``feature_names[d]`` of ``tickers[i]`` on
    ``dates[t]``. The first ``d1`` features are raw bar fields, the remaining
    ``d2`` are indicators.
    """

    dates: np.ndarray
    tickers: list[str]
    values: np.ndarray
    feature_names: list[str]
    d1: int
    d2: int = 0

    def __post_init__(self):
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        self.tickers = list(self.tickers)
        self.feature_names = list(self.feature_names)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.dates), len(self.tickers), len(self.feature_names)):
            raise DataError(
                f"values shape {self.values.shape} does not match "
                f"(T={len(self.dates)}, N={len(self.tickers)}, D={len(self.feature_names)})"
            )
        if self.d1 + self.d2 != len(self.feature_names):
            raise DataError("d1 + d2 must equal the number of features")
        if len(self.dates) > 1 and not np.all(np.diff(self.dates).astype(int) > 0):
            raise DataError("dates must be strictly increasing")
        if len(set(self.tickers)) != len(self.tickers):
            raise DataError("duplicate tickers in panel")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    @property
    def D(self) -> int:
        return self.values.shape[2]

    def feature(self, name: str) -> np.ndarray:
        """``(T, N)`` slice of one feature."""
        try:
            return self.values[:, :, self.feature_names.index(name)]
        except ValueError:
            raise DataError(f"panel has no feature {name!r}") from None

    def slice_rows(self, start: int | None = None, stop: int | None = None) -> FeaturePanel:
        return replace(self, dates=self.dates[start:stop], values=self.values[start:stop])

    def to_frame(self) -> pd.DataFrame:
        """Long format: one row per (date, ticker)."""
        T, N, D = self.values.shape
        frame = pd.DataFrame(self.values.reshape(T * N, D), columns=self.feature_names)
        frame.insert(0, "ticker", np.tile(np.array(self.tickers, dtype=object), T))
        frame.insert(0, "date", np.repeat(self.dates, N))
        return frame


# -- ingestion ---------------------------------------------------------------


def _parse_row(row: list[str], line: int) -> Bar:
    if len(row) != len(CSV_COLUMNS):
        raise ParseError(f"expected {len(CSV_COLUMNS)} fields, got {len(row)}", line)
    try:
        day = date.fromisoformat(row[0].strip())
    except ValueError:
        raise ParseError(f"invalid ISO-8601 date {row[0]!r}", line) from None
    ticker = row[1].strip()
    if not ticker:
        raise ParseError("empty ticker", line)
    try:
        o, h, l, c, v = (float(x) for x in row[2:])
    except ValueError:
        raise ParseError("non-numeric price or volume field", line) from None
    bar = Bar(day, ticker, o, h, l, c, v)
    problems = bar.violations()
    if problems:
        raise ParseError("; ".join(problems), line)
    return bar


def load_bars(path: str | Path, format: str = "csv") -> FeaturePanel:
    """Read a bar CSV into a raw panel with ``D = 5`` (OHLC + volume).

    Tickers are inner-joined on dates: a date is kept only if every ticker
    has a bar on it.
    """
    if format != "csv":
        raise ConfigError(f"unsupported bar format {format!r}")
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path} does not exist")

    bars: dict[tuple[date, str], Bar] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty file", 1)
        header = [h.strip().lower() for h in header]
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise ParseError(f"missing columns {missing}", 1)
        order = [header.index(c) for c in CSV_COLUMNS]
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
            bar = _parse_row([row[k] for k in order], line)
            key = (bar.date, bar.ticker)
            if key in bars:
                raise ParseError(f"duplicate bar for {bar.ticker} on {bar.date}", line)
            bars[key] = bar

    if not bars:
        raise DataError(f"{path} contains no bars")

    tickers = sorted({t for _, t in bars})
    by_date: dict[date, set[str]] = {}
    for d, t in bars:
        by_date.setdefault(d, set()).add(t)
    all_dates = sorted(by_date)
    dates = [d for d in all_dates if len(by_date[d]) == len(tickers)]
    dropped = len(all_dates) - len(dates)
    if dropped:
        logger.warning("inner join dropped %d of %d dates with missing bars", dropped, len(all_dates))
    if not dates:
        raise DataError("no date is shared by all tickers")

    values = np.empty((len(dates), len(tickers), len(RAW_FEATURES)))
    for t, d in enumerate(dates):
        for i, tk in enumerate(tickers):
            b = bars[(d, tk)]
            values[t, i] = (b.open, b.high, b.low, b.close, b.volume)
    return FeaturePanel(np.array(dates, dtype="datetime64[D]"), tickers, values, list(RAW_FEATURES), d1=5)


def write_bars_csv(panel: FeaturePanel, path: str | Path) -> None:
    frame = panel.to_frame()[list(CSV_COLUMNS)].copy()
    frame["date"] = pd.to_datetime(frame["date"]).dt.strftime("%Y-%m-%d")
    frame.to_csv(path, index=False)


# -- indicators --------------------------------------------------------------


@dataclass(frozen=True)
class Indicator:
    name: str
    lookback: int  # leading rows without a finite value
    fn: Callable[[FeaturePanel], np.ndarray]


_REGISTRY: dict[str, Indicator] = {}
RETURN_HORIZONS = (1, 5, 10, 20)
ROLLING_WINDOWS = (5, 10, 20, 60)


def register_indicator(name: str, lookback: int):
    """Decorator adding a custom indicator ``fn(panel) -> (T, N) array``.

    The first ``lookback`` rows of the returned array are ignored (treated
    as warm-up and dropped from the panel).
    """

    def wrap(fn):
        _REGISTRY[name] = Indicator(name, lookback, fn)
        return fn

    return wrap


def _rolling(x: np.ndarray, n: int, reduce: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    out = np.full(x.shape, np.nan)
    if x.shape[0] >= n:
        view = np.lib.stride_tricks.sliding_window_view(x, n, axis=0)
        out[n - 1 :] = reduce(view)
    return out


def _rolling_std(view: np.ndarray) -> np.ndarray:
    # population std, two-pass for accuracy
    mean = view.mean(axis=-1, keepdims=True)
    return np.sqrt(((view - mean) ** 2).mean(axis=-1))


_ROLLING_REDUCERS = {
    "ma": lambda v: v.mean(axis=-1),
    "std": _rolling_std,
    "max": lambda v: v.max(axis=-1),
    "min": lambda v: v.min(axis=-1),
}


def _builtin(name: str) -> Indicator | None:
    m = re.fullmatch(r"ret_(\d+)", name)
    if m and int(m.group(1)) in RETURN_HORIZONS:
        n = int(m.group(1))

        def ret(panel: FeaturePanel, n=n) -> np.ndarray:
            close = panel.feature("close")
            out = np.full(close.shape, np.nan)
            out[n:] = close[n:] / close[:-n] - 1.0
            return out

        return Indicator(name, n, ret)
    m = re.fullmatch(r"(ma|std|max|min)_(\d+)", name)
    if m and int(m.group(2)) in ROLLING_WINDOWS:
        kind, n = m.group(1), int(m.group(2))
        return Indicator(name, n - 1, lambda p, n=n, k=kind: _rolling(p.feature("close"), n, _ROLLING_REDUCERS[k]))
    if name == "close_open":
        return Indicator(name, 0, lambda p: p.feature("close") / p.feature("open"))
    if name == "hl_range":
        return Indicator(name, 0, lambda p: (p.feature("high") - p.feature("low")) / p.feature("close"))
    if name == "vol_z":

        def vol_z(panel: FeaturePanel) -> np.ndarray:
            vol = panel.feature("volume")
            mean = _rolling(vol, 20, lambda v: v.mean(axis=-1))
            std = _rolling(vol, 20, _rolling_std)
            with np.errstate(invalid="ignore", divide="ignore"):
                z = (vol - mean) / std
            z[(std == 0) & np.isfinite(mean)] = 0.0
            return z

        return Indicator(name, 19, vol_z)
    return None


def get_indicator(name: str) -> Indicator:
    if name in _REGISTRY:
        return _REGISTRY[name]
    ind = _builtin(name)
    if ind is None:
        raise ConfigError(f"unknown indicator {name!r}")
    return ind


def builtin_indicator_names() -> list[str]:
    names = [f"ret_{n}" for n in RETURN_HORIZONS]
    for kind in _ROLLING_REDUCERS:
        names += [f"{kind}_{n}" for n in ROLLING_WINDOWS]
    return names + ["close_open", "hl_range", "vol_z"]


def compute_indicators(panel: FeaturePanel, names: Sequence[str]) -> FeaturePanel:
    """Append one column per indicator and drop the warm-up rows."""
    indicators = [get_indicator(n) for n in names]
    if not indicators:
        return panel
    dup = {n for n in names if list(names).count(n) > 1 or n in panel.feature_names}
    if dup:
        raise ConfigError(f"duplicate feature names {sorted(dup)}")
    warmup = max(ind.lookback for ind in indicators)
    if panel.T <= warmup:
        raise InsufficientDataError(f"need more than {warmup} rows for indicators, panel has {panel.T}")
    columns = []
    for ind in indicators:
        col = np.asarray(ind.fn(panel), dtype=np.float64)
        if col.shape != (panel.T, panel.N):
            raise ConfigError(f"indicator {ind.name} returned shape {col.shape}")
        columns.append(col)
    values = np.concatenate([panel.values, np.stack(columns, axis=-1)], axis=-1)[warmup:]
    if not np.all(np.isfinite(values)):
        bad = [ind.name for ind, c in zip(indicators, columns) if not np.all(np.isfinite(c[warmup:]))]
        raise DataError(f"indicators produced non-finite values after warm-up: {bad}")
    return FeaturePanel(
        panel.dates[warmup:],
        panel.tickers,
        values,
        panel.feature_names + list(names),
        d1=panel.d1,
        d2=panel.d2 + len(indicators),
    )


# -- windows and splits ------------------------------------------------------


@dataclass
class WindowSample:
    window: np.ndarray  # (W, N, D)
    label: np.ndarray  # (N,) next-day close-to-close return
    anchor_date: np.datetime64
    label_date: np.datetime64


def make_windows(panel: FeaturePanel, W: int) -> list[WindowSample]:
    """Slide a length-``W`` window over the panel; ``T - W`` samples.

    Sample ``j`` covers rows ``[j, j + W)`` and is labelled with the
    return from row ``j + W - 1`` to row ``j + W``.
    """
    if W < 1:
        raise ConfigError("window length must be positive")
    if panel.T < W + 1:
        raise InsufficientDataError(f"need T >= W + 1 = {W + 1} rows, panel has {panel.T}")
    close = panel.feature("close")
    labels = close[1:] / close[:-1] - 1.0
    return [
        WindowSample(
            window=panel.values[j : j + W],
            label=labels[j + W - 1],
            anchor_date=panel.dates[j + W - 1],
            label_date=panel.dates[j + W],
        )
        for j in range(panel.T - W)
    ]


@dataclass
class NormStats:
    mean: np.ndarray  # (D,)
    std: np.ndarray  # (D,)

    @property
    def zero_variance(self) -> np.ndarray:
        return self.std < 1e-12

    def apply(self, x: np.ndarray) -> np.ndarray:
        scale = np.where(self.zero_variance, 1.0, self.std)
        out = (x - self.mean) / scale
        return np.where(self.zero_variance, 0.0, out)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> NormStats:
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class DatasetSplit:
    train: list[WindowSample]
    test: list[WindowSample]
    boundary_date: np.datetime64
    norm_stats: NormStats | None = None
    feature_names: list[str] = field(default_factory=list)
    tickers: list[str] = field(default_factory=list)


def split_windows(
    windows: Sequence[WindowSample], boundary_date, feature_names=(), tickers=()
) -> DatasetSplit:
    """Chronological split.

    Train windows have their label date strictly before the boundary; test
    windows are anchored on or after it. The single window that straddles
    the boundary with its label is dropped.
    """
    boundary = np.datetime64(boundary_date, "D")
    train = [w for w in windows if w.label_date < boundary]
    test = [w for w in windows if w.anchor_date >= boundary]
    return DatasetSplit(train, test, boundary, None, list(feature_names), list(tickers))


def build_split(panel: FeaturePanel, W: int, boundary_date=None, test_fraction: float = 0.2) -> DatasetSplit:
    """Window a panel and split it; default boundary keeps the last ``test_fraction`` of windows for test."""
    windows = make_windows(panel, W)
    if boundary_date is None:
        n_test = max(1, int(round(len(windows) * test_fraction)))
        boundary_date = windows[len(windows) - n_test].anchor_date
    return split_windows(windows, boundary_date, panel.feature_names, panel.tickers)


def train_norm_stats(train: Sequence[WindowSample]) -> NormStats:
    if not train:
        raise InsufficientDataError("cannot compute normalization statistics without train windows")
    flat = np.stack([w.window for w in train]).reshape(-1, train[0].window.shape[-1])
    mean = flat.mean(axis=0)
    std = np.sqrt(((flat - mean) ** 2).mean(axis=0))
    return NormStats(mean, std)


def normalize_features(split: DatasetSplit, stats: NormStats | None = None) -> DatasetSplit:
    """Z-score every window with statistics of the train windows.

    Zero-variance features map to 0. Labels are left untouched.
    """
    stats = stats or train_norm_stats(split.train)

    def norm(samples):
        return [replace(w, window=stats.apply(w.window)) for w in samples]

    return replace(split, train=norm(split.train), test=norm(split.test), norm_stats=stats)


# -- synthetic markets -------------------------------------------------------


def _ohlcv_from_close(rng: np.random.Generator, close: np.ndarray, vol: np.ndarray) -> np.ndarray:
    T, N = close.shape
    prev = np.vstack([close[:1], close[:-1]])
    gap = rng.normal(0.0, 0.3, size=(T, N)) * vol
    open_ = prev * np.exp(gap)
    wick_hi = np.abs(rng.normal(0.0, 0.5, size=(T, N))) * vol
    wick_lo = np.abs(rng.normal(0.0, 0.5, size=(T, N))) * vol
    high = np.maximum(open_, close) * np.exp(wick_hi)
    low = np.minimum(open_, close) * np.exp(-wick_lo)

    log_ret = np.vstack([np.zeros((1, N)), np.diff(np.log(close), axis=0)])
    log_vol = np.empty((T, N))
    level = np.log(1e6) + rng.normal(0.0, 0.5, size=N)
    log_vol[0] = level
    shocks = rng.normal(0.0, 0.15, size=(T, N))
    for t in range(1, T):
        log_vol[t] = level + 0.9 * (log_vol[t - 1] - level) + shocks[t] + 5.0 * np.abs(log_ret[t])
    return np.stack([open_, high, low, close, np.exp(log_vol)], axis=-1)


def _calendar(T: int) -> np.ndarray:
    return pd.bdate_range("2015-01-01", periods=T).values.astype("datetime64[D]")


def generate_synthetic(seed: int, N: int, T: int, regime: str = "mixed") -> FeaturePanel:
    """Geometric price paths with a shared market component.

    ``trend`` stocks carry a positive drift, ``mean_revert`` stocks follow an
    Ornstein-Uhlenbeck log-price around their starting level, ``mixed``
    assigns each stock one of the two at random. Deterministic in ``seed``.
    """
    if N < 1 or T < 2:
        raise ConfigError("generate_synthetic needs N >= 1 and T >= 2")
    if regime not in ("trend", "mean_revert", "mixed"):
        raise ConfigError(f"unknown regime {regime!r}")
    rng = np.random.default_rng(seed)
    vol = rng.uniform(0.010, 0.020, size=N)
    beta = rng.uniform(0.5, 1.5, size=N)
    drift = rng.uniform(0.0008, 0.0020, size=N)
    kappa = rng.uniform(0.02, 0.10, size=N)
    start = rng.uniform(20.0, 200.0, size=N)
    if regime == "trend":
        trending = np.ones(N, dtype=bool)
    elif regime == "mean_revert":
        trending = np.zeros(N, dtype=bool)
    else:
        trending = rng.random(N) < 0.5

    market = rng.normal(0.0002, 0.008, size=T)
    idio = rng.normal(0.0, 1.0, size=(T, N)) * vol
    log_p = np.empty((T, N))
    log_p[0] = np.log(start)
    anchor = np.log(start)
    for t in range(1, T):
        shock = beta * market[t] + idio[t]
        trend_step = drift + shock
        revert_step = kappa * (anchor - log_p[t - 1]) + shock
        log_p[t] = log_p[t - 1] + np.where(trending, trend_step, revert_step)
    close = np.exp(log_p)
    values = _ohlcv_from_close(rng, close, vol)
    tickers = [f"S{i:03d}" for i in range(N)]
    return FeaturePanel(_calendar(T), tickers, values, list(RAW_FEATURES), d1=5)


def generate_planted_factor(
    seed: int,
    N: int,
    T: int,
    premium: float = 0.004,
    noise: float = 0.01,
    persistence: float = 0.99,
) -> tuple[FeaturePanel, np.ndarray]:
    """Market whose next-day returns are linear in a hidden, slowly moving loading.

    ``r[t+1, i] = premium * loading[t, i] + beta_i * m[t+1] + noise * eps``
    with ``loading`` an AR(1) of unit stationary variance. Returns the panel
    and the ``(T, N)`` loading matrix.
    """
    rng = np.random.default_rng(seed)
    loadings = np.empty((T, N))
    loadings[0] = rng.normal(size=N)
    innov = math.sqrt(1.0 - persistence**2)
    for t in range(1, T):
        loadings[t] = persistence * loadings[t - 1] + innov * rng.normal(size=N)
    beta = rng.uniform(0.5, 1.5, size=N)
    market = rng.normal(0.0002, 0.008, size=T)
    eps = rng.normal(size=(T, N))
    rets = np.zeros((T, N))
    rets[1:] = premium * loadings[:-1] + beta * market[1:, None] + noise * eps[1:]
    close = rng.uniform(20.0, 200.0, size=N) * np.cumprod(1.0 + rets, axis=0)
    values = _ohlcv_from_close(rng, close, np.full(N, noise))
    tickers = [f"S{i:03d}" for i in range(N)]
    return FeaturePanel(_calendar(T), tickers, values, list(RAW_FEATURES), d1=5), loadings


# -- panel cache -------------------------------------------------------------


def save_panel(panel: FeaturePanel, out_dir: str | Path, stats: NormStats | None = None, extra: dict | None = None) -> dict:
    """Write ``panel.parquet`` plus a ``manifest.json`` sidecar; returns the manifest.

    ``extra`` entries (e.g. the split boundary) are merged into the manifest.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = panel.to_frame()
    frame["date"] = pd.to_datetime(frame["date"]).dt.strftime("%Y-%m-%d")
    frame.to_parquet(out_dir / "panel.parquet", index=False)
    digest = hashlib.sha256(np.ascontiguousarray(panel.values).tobytes())
    digest.update(json.dumps([panel.tickers, panel.feature_names, str(panel.dates[0]), str(panel.dates[-1])]).encode())
    manifest = {
        "feature_names": panel.feature_names,
        "d1": panel.d1,
        "d2": panel.d2,
        "D": panel.D,
        "T": panel.T,
        "N": panel.N,
        "tickers": panel.tickers,
        "date_range": [str(panel.dates[0]), str(panel.dates[-1])],
        "normalization": stats.to_dict() if stats is not None else None,
        "values_sha256": digest.hexdigest(),
        **(extra or {}),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_panel_manifest(cache_dir: str | Path) -> dict:
    path = Path(cache_dir) / "manifest.json"
    if not path.exists():
        raise DataError(f"no panel manifest in {cache_dir}")
    return json.loads(path.read_text())


def load_panel(cache_dir: str | Path) -> FeaturePanel:
    cache_dir = Path(cache_dir)
    manifest_path = cache_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no panel manifest in {cache_dir}")
    manifest = json.loads(manifest_path.read_text())
    frame = pd.read_parquet(cache_dir / "panel.parquet")
    tickers = manifest["tickers"]
    names = manifest["feature_names"]
    dates = np.array(sorted(frame["date"].unique()), dtype="datetime64[D]")
    T, N = len(dates), len(tickers)
    frame = frame.set_index(["date", "ticker"])
    idx = pd.MultiIndex.from_product([[str(d) for d in dates], tickers])
    values = frame.loc[idx, names].to_numpy(dtype=np.float64).reshape(T, N, len(names))
    return FeaturePanel(dates, tickers, values, names, d1=manifest["d1"], d2=manifest["d2"])
