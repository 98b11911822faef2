import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from storm.errors import ConfigError, DataError, InsufficientDataError, ParseError
from storm.market_data import (
    NormStats,
    build_split,
    builtin_indicator_names,
    compute_indicators,
    generate_planted_factor,
    generate_synthetic,
    load_bars,
    load_panel,
    make_windows,
    normalize_features,
    register_indicator,
    save_panel,
    split_windows,
    train_norm_stats,
    write_bars_csv,
)

from conftest import panel_from_close

HEADER = "date,ticker,open,high,low,close,volume\n"


def _csv(tmp_path, rows, name="bars.csv"):
    path = tmp_path / name
    path.write_text(HEADER + "".join(r + "\n" for r in rows), encoding="utf-8")
    return path


def _row(d, t, c=10.0):
    return f"{d},{t},{c},{c + 1},{c - 1},{c},1000"


# -- load_bars ----------------------------------------------------------------


def test_load_two_tickers_three_days(tmp_path):
    rows = [_row(f"2021-01-0{d}", t) for d in (4, 5, 6) for t in ("A", "B")]
    panel = load_bars(_csv(tmp_path, rows))
    assert (panel.T, panel.N, panel.D) == (3, 2, 5)
    assert panel.d1 == 5 and panel.d2 == 0
    assert panel.tickers == ["A", "B"]


def test_inner_join_drops_incomplete_dates(tmp_path):
    rows = [_row("2021-01-04", "A"), _row("2021-01-04", "B"), _row("2021-01-05", "A"),
            _row("2021-01-06", "A"), _row("2021-01-06", "B")]
    panel = load_bars(_csv(tmp_path, rows))
    assert panel.T == 2
    assert [str(d) for d in panel.dates] == ["2021-01-04", "2021-01-06"]


def test_rows_are_date_sorted(tmp_path):
    rows = [_row("2021-01-05", "A", 11), _row("2021-01-04", "A", 10)]
    panel = load_bars(_csv(tmp_path, rows))
    assert panel.feature("close")[:, 0].tolist() == [10.0, 11.0]


def test_low_above_high_names_line(tmp_path):
    rows = [_row("2021-01-04", "A"), "2021-01-05,A,10,9,11,10,100"]
    with pytest.raises(ParseError, match="line 3"):
        load_bars(_csv(tmp_path, rows))


@pytest.mark.parametrize("bad", ["2021-13-01,A,1,1,1,1,1", "2021-01-04,A,x,1,1,1,1", "2021-01-04,A,1,1,1,1",
                                 "2021-01-04,A,1,1,1,1,-5"])
def test_malformed_rows(tmp_path, bad):
    with pytest.raises(ParseError, match="line 2"):
        load_bars(_csv(tmp_path, [bad]))


def test_duplicate_date_ticker_rejected(tmp_path):
    with pytest.raises(DataError, match="duplicate"):
        load_bars(_csv(tmp_path, [_row("2021-01-04", "A"), _row("2021-01-04", "A")]))


def test_missing_columns_rejected(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("date,ticker,close\n2021-01-04,A,1\n")
    with pytest.raises(DataError):
        load_bars(path)


def test_unsupported_format(tmp_path):
    with pytest.raises(ConfigError):
        load_bars(_csv(tmp_path, [_row("2021-01-04", "A")]), format="xlsx")


def test_write_then_load_roundtrip(tmp_path):
    panel = generate_synthetic(3, 4, 30)
    write_bars_csv(panel, tmp_path / "b.csv")
    back = load_bars(tmp_path / "b.csv")
    np.testing.assert_allclose(back.values, panel.values, rtol=1e-12)
    assert back.tickers == panel.tickers


# -- indicators ---------------------------------------------------------------


def test_rolling_mean_of_constant():
    out = compute_indicators(panel_from_close(np.full(20, 7.5)), ["ma_5"])
    np.testing.assert_array_equal(out.feature("ma_5"), 7.5)


def test_one_day_return():
    out = compute_indicators(panel_from_close([100.0, 110.0]), ["ret_1"])
    assert out.T == 1
    assert out.feature("ret_1")[0, 0] == pytest.approx(0.10)


def test_rolling_std_matches_two_pass_oracle():
    t = np.arange(200)
    close = 100 + 5 * np.sin(t / 7.0) + 0.01 * t
    out = compute_indicators(panel_from_close(close), ["std_20"])
    got = out.feature("std_20")[:, 0]
    expect = []
    for end in range(19, 200):
        w = close[end - 19 : end + 1]
        m = sum(w) / 20
        expect.append(np.sqrt(sum((x - m) ** 2 for x in w) / 20))
    np.testing.assert_allclose(got, expect, atol=1e-10, rtol=0)


def test_indicator_columns_and_warmup():
    panel = generate_synthetic(0, 3, 100)
    out = compute_indicators(panel, ["ret_5", "ma_20", "hl_range"])
    assert out.D == panel.D + 3 and out.d2 == 3 and out.d1 == 5
    assert out.T == panel.T - 19
    assert np.isfinite(out.values).all()
    assert out.dates[0] == panel.dates[19]


def test_all_builtins_finite():
    panel = generate_synthetic(1, 2, 120)
    out = compute_indicators(panel, builtin_indicator_names())
    assert np.isfinite(out.values).all()
    assert out.T == 120 - 59


def test_unknown_indicator():
    with pytest.raises(ConfigError, match="unknown indicator"):
        compute_indicators(panel_from_close(np.ones(10)), ["ret_3"])


def test_indicator_needs_history():
    with pytest.raises(InsufficientDataError):
        compute_indicators(panel_from_close(np.ones(4)), ["ma_5"])


def test_extension_hook():
    @register_indicator("log_close_test", lookback=0)
    def _log_close(panel):
        return np.log(panel.feature("close"))

    out = compute_indicators(panel_from_close([1.0, np.e]), ["log_close_test"])
    np.testing.assert_allclose(out.feature("log_close_test")[:, 0], [0.0, 1.0])


# -- windows ------------------------------------------------------------------


@pytest.mark.parametrize("T,expected", [(65, 1), (100, 36)])
def test_window_counts(T, expected):
    assert len(make_windows(panel_from_close(np.linspace(1, 2, T)), 64)) == expected


def test_first_labels_are_close_to_close_returns():
    panel = generate_synthetic(5, 3, 100)
    close = panel.feature("close")
    w = make_windows(panel, 64)[0]
    np.testing.assert_allclose(w.label, (close[64] - close[63]) / close[63], rtol=1e-14)
    np.testing.assert_array_equal(w.window, panel.values[:64])
    assert w.anchor_date == panel.dates[63] and w.label_date == panel.dates[64]


def test_too_short_for_window():
    with pytest.raises(InsufficientDataError):
        make_windows(panel_from_close(np.ones(64)), 64)


@settings(max_examples=25, deadline=None)
@given(T=st.integers(5, 60), W=st.integers(1, 20))
def test_windows_are_leak_free(T, W):
    if T < W + 1:
        return
    panel = panel_from_close(np.linspace(1, 2, T))
    for j, s in enumerate(make_windows(panel, W)):
        inside = panel.dates[j : j + W]
        assert s.label_date > inside.max()
        assert s.window.shape[0] == W


def test_split_respects_boundary():
    panel = generate_synthetic(0, 2, 200)
    split = build_split(panel, 20)
    assert split.train and split.test
    assert all(s.anchor_date < split.boundary_date for s in split.train)
    assert all(s.label_date < split.boundary_date for s in split.train)
    assert all(s.anchor_date >= split.boundary_date for s in split.test)


def test_explicit_boundary():
    panel = generate_synthetic(0, 2, 100)
    windows = make_windows(panel, 10)
    boundary = panel.dates[60]
    split = split_windows(windows, boundary)
    assert max(s.label_date for s in split.train) < boundary <= min(s.anchor_date for s in split.test)
    # exactly one window straddles the boundary with its label
    assert len(split.train) + len(split.test) == len(windows) - 1


# -- normalization ------------------------------------------------------------


def test_zscore_value():
    stats = NormStats(np.array([3.0]), np.array([2.0]))
    assert stats.apply(np.array([5.0]))[0] == 1.0


def test_constant_feature_maps_to_zero():
    panel = panel_from_close(np.linspace(10, 20, 40))
    split = normalize_features(build_split(panel, 5))
    vol = np.stack([s.window[..., 4] for s in split.train + split.test])
    np.testing.assert_array_equal(vol, 0.0)


def test_renormalizing_gives_unit_moments():
    panel = compute_indicators(generate_synthetic(2, 4, 150), ["ret_1", "ma_5"])
    split = normalize_features(build_split(panel, 10))
    again = normalize_features(split)
    flat = np.stack([s.window for s in again.train]).reshape(-1, panel.D)
    np.testing.assert_allclose(flat.mean(0), 0.0, atol=1e-6)
    np.testing.assert_allclose(flat.std(0), 1.0, atol=1e-6)


def test_stats_depend_on_train_only():
    panel = generate_synthetic(2, 3, 120)
    split = build_split(panel, 10)
    stats = train_norm_stats(split.train)
    for s in split.test:
        s.window = s.window * 1000.0
    again = normalize_features(split)
    np.testing.assert_array_equal(again.norm_stats.mean, stats.mean)
    np.testing.assert_array_equal(again.norm_stats.std, stats.std)


def test_normstats_dict_roundtrip():
    stats = NormStats(np.array([1.0, 2.0]), np.array([0.5, 0.0]))
    back = NormStats.from_dict(json.loads(json.dumps(stats.to_dict())))
    np.testing.assert_array_equal(back.mean, stats.mean)
    np.testing.assert_array_equal(back.std, stats.std)


# -- synthetic ----------------------------------------------------------------


def test_synthetic_is_deterministic():
    a, b = generate_synthetic(7, 5, 80, "mixed"), generate_synthetic(7, 5, 80, "mixed")
    assert a.values.tobytes() == b.values.tobytes()
    assert generate_synthetic(8, 5, 80).values.tobytes() != a.values.tobytes()


def test_trend_regime_rises():
    panel = generate_synthetic(0, 50, 500, "trend")
    close = panel.feature("close")
    assert (close[-1] > close[0]).mean() >= 0.8


def test_single_stock_panel():
    panel = generate_synthetic(0, 1, 30, "mean_revert")
    assert (panel.N, panel.T, panel.D) == (1, 30, 5)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), regime=st.sampled_from(["trend", "mean_revert", "mixed"]))
def test_synthetic_bars_satisfy_invariants(seed, regime):
    panel = generate_synthetic(seed, 3, 40, regime)
    o, h, l, c, v = (panel.values[..., k] for k in range(5))
    assert (l <= np.minimum(o, c)).all() and (h >= np.maximum(o, c)).all()
    assert (v >= 0).all() and (np.stack([o, h, l, c]) > 0).all()


def test_planted_factor_returns_follow_loading():
    panel, load = generate_planted_factor(0, 30, 400, premium=0.004, noise=0.002)
    close = panel.feature("close")
    rets = close[1:] / close[:-1] - 1
    # cross-sectionally demeaned returns correlate with yesterday's loading
    x = (load[:-1] - load[:-1].mean(1, keepdims=True)).ravel()
    y = (rets - rets.mean(1, keepdims=True)).ravel()
    assert np.corrcoef(x, y)[0, 1] > 0.5


def test_invalid_synthetic_arguments():
    with pytest.raises(ConfigError):
        generate_synthetic(0, 0, 10)
    with pytest.raises(ConfigError):
        generate_synthetic(0, 2, 10, "sideways")


# -- cache --------------------------------------------------------------------


def test_panel_cache_roundtrip(tmp_path):
    panel = compute_indicators(generate_synthetic(1, 3, 50), ["ret_1"])
    stats = train_norm_stats(build_split(panel, 10).train)
    man = save_panel(panel, tmp_path / "c", stats)
    back = load_panel(tmp_path / "c")
    np.testing.assert_array_equal(back.values, panel.values)
    assert back.feature_names == panel.feature_names and back.tickers == panel.tickers
    assert man["D"] == 6 and man["normalization"]["mean"] == stats.mean.tolist()
    again = save_panel(back, tmp_path / "d", stats)
    assert again["values_sha256"] == man["values_sha256"]
