import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from storm.errors import DataError
from storm.evaluation import (
    DailyPrediction,
    annualized_volatility,
    annualized_yield,
    build_report,
    calmar_ratio,
    cumulative_wealth,
    max_drawdown,
    rank_ic_day,
    rank_ic_series,
    sharpe_ratio,
    summarize_ic,
    wealth_metrics,
    write_daily_ic,
)


def oracle_ranks(v):
    """Average ranks (1-based) by counting, no sorting."""
    v = list(v)
    return [sum(1 for u in v if u < x) + (sum(1 for u in v if u == x) + 1) / 2 for x in v]


def oracle_spearman(a, b):
    ra, rb = oracle_ranks(a), oracle_ranks(b)
    n = len(ra)
    ma, mb = sum(ra) / n, sum(rb) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(ra, rb))
    va = sum((x - ma) ** 2 for x in ra)
    vb = sum((y - mb) ** 2 for y in rb)
    return cov / math.sqrt(va * vb)


# -- rank IC ------------------------------------------------------------------


def test_rank_ic_extremes():
    y = np.array([0.3, -0.1, 0.2, 0.05])
    assert rank_ic_day(DailyPrediction("d", y, y)) == pytest.approx(1.0, abs=1e-15)
    assert rank_ic_day(DailyPrediction("d", -y, y)) == pytest.approx(-1.0, abs=1e-15)


def test_rank_ic_matches_oracle_on_random_and_tied_vectors():
    rng = np.random.default_rng(0)
    for i in range(200):
        a = rng.normal(size=12)
        b = rng.normal(size=12)
        if i % 2:
            a = np.round(a, 0)  # plenty of ties
        assert rank_ic_day(DailyPrediction("d", a, b)) == pytest.approx(oracle_spearman(a, b), abs=1e-9)


def test_rank_ic_all_tied_warns_and_is_zero():
    with pytest.warns(RuntimeWarning):
        assert rank_ic_day(DailyPrediction("d", np.ones(4), np.arange(4.0))) == 0.0


def test_rank_ic_input_validation():
    with pytest.raises(DataError):
        DailyPrediction("d", np.ones(3), np.ones(4))
    with pytest.raises(DataError):
        DailyPrediction("d", [np.nan, 1.0], [1.0, 2.0])
    with pytest.raises(DataError):
        rank_ic_day(DailyPrediction("d", [1.0], [2.0]))
    with pytest.raises(DataError):
        rank_ic_series([])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), kind=st.sampled_from(["exp", "cube", "affine", "arctan"]))
def test_rank_ic_invariant_to_monotone_transform(seed, kind):
    rng = np.random.default_rng(seed)
    y_hat, y = rng.normal(size=15), rng.normal(size=15)
    f = {"exp": np.exp, "cube": lambda v: v**3, "affine": lambda v: 3.0 * v - 7.0, "arctan": np.arctan}[kind]
    a = rank_ic_day(DailyPrediction("d", y_hat, y))
    b = rank_ic_day(DailyPrediction("d", f(y_hat), y))
    assert a == pytest.approx(b, abs=1e-12)


def test_icir_cases():
    assert summarize_ic(np.full(10, 0.05)) == (pytest.approx(0.05), None)
    ic, ir = summarize_ic(np.array([0.1, -0.1]))
    assert ic == 0.0 and ir == 0.0
    ic, ir = summarize_ic(np.array([0.2]))
    assert ic == 0.2 and ir is None
    rng = np.random.default_rng(1)
    d = rng.normal(0.03, 0.1, size=50)
    mean = sum(d) / len(d)
    std = math.sqrt(sum((x - mean) ** 2 for x in d) / len(d))
    ic, ir = summarize_ic(d)
    assert ic == pytest.approx(mean, abs=1e-15) and ir == pytest.approx(mean / std, rel=1e-12)


def test_rank_ic_series_and_csv(tmp_path):
    rng = np.random.default_rng(2)
    preds = [DailyPrediction(f"2020-01-{i + 1:02d}", rng.normal(size=6), rng.normal(size=6)) for i in range(5)]
    ic, ir = rank_ic_series(preds)
    dailies = [oracle_spearman(p.y_hat, p.y_true) for p in preds]
    assert ic == pytest.approx(np.mean(dailies), abs=1e-12)
    write_daily_ic(preds, tmp_path / "ic.csv")
    rows = (tmp_path / "ic.csv").read_text().splitlines()
    assert rows[0] == "date,rank_ic" and len(rows) == 6
    assert float(rows[1].split(",")[1]) == pytest.approx(dailies[0], abs=1e-12)


# -- wealth metrics --------------------------------------------------------------


def test_published_market_index_row():
    apy, mdd, avo = 0.058, 0.254, 0.410
    assert calmar_ratio(apy, mdd) == pytest.approx(0.228, abs=0.002)
    assert sharpe_ratio(apy, avo, 0.0) == pytest.approx(0.142, abs=0.002)
    assert annualized_yield(1.184, 3 * 252) == pytest.approx(0.058, abs=0.001)


def test_flat_wealth():
    rep = wealth_metrics(np.zeros(20))
    assert (rep.cw, rep.apy, rep.mdd, rep.avo) == (1.0, 0.0, 0.0, 0.0)
    assert rep.cr is None and rep.asr is None


def test_hand_ledger():
    rep = wealth_metrics([0.1, -0.05, 0.02])
    w1 = 1.1
    w2 = w1 * 0.95
    w3 = w2 * 1.02
    assert rep.cw == pytest.approx(w3, rel=1e-15)
    assert rep.mdd == pytest.approx((w1 - w2) / w1, rel=1e-12)
    assert rep.apy == pytest.approx(w3 ** (252 / 3) - 1, rel=1e-12)
    mean = (0.1 - 0.05 + 0.02) / 3
    var = ((0.1 - mean) ** 2 + (-0.05 - mean) ** 2 + (0.02 - mean) ** 2) / 3
    assert rep.avo == pytest.approx(math.sqrt(var * 252), rel=1e-12)
    assert rep.cr == rep.apy / rep.mdd and rep.asr == rep.apy / rep.avo
    assert rep.n_days == 3 and rep.annualization == 252


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(1e-3, 1e6))
def test_mdd_scale_invariant_and_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    w = cumulative_wealth(rng.normal(0, 0.03, size=40))
    a, b = max_drawdown(w), max_drawdown(w * scale)
    assert 0.0 <= a <= 1.0
    assert a == pytest.approx(b, rel=1e-12, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), r_f=st.floats(0, 0.05))
def test_report_identities(seed, r_f):
    rng = np.random.default_rng(seed)
    rep = wealth_metrics(rng.normal(0.0005, 0.01, size=30), r_f=r_f)
    assert rep.cw > 0 and rep.avo >= 0 and 0 <= rep.mdd <= 1
    if rep.mdd > 0:
        assert abs(rep.cr - rep.apy / rep.mdd) <= 1e-9
    assert abs(rep.asr - (rep.apy - r_f) / rep.avo) <= 1e-9


def test_wealth_input_errors():
    with pytest.raises(DataError):
        cumulative_wealth([0.1, -1.0])
    with pytest.raises(DataError):
        annualized_yield(1.1, 0)
    assert annualized_volatility([0.01]) == 0.0


def test_build_report_json(tmp_path):
    preds = [DailyPrediction("a", [1.0, 2.0, 3.0], [1.0, 3.0, 2.0]), DailyPrediction("b", [1.0, 2.0, 3.0], [1.0, 2.0, 3.0])]
    rep = build_report(preds, [0.01, -0.02], 0.0)
    assert rep.rank_ic == pytest.approx(0.75) and rep.n_days == 2
    rep.to_json(tmp_path / "m.json")
    data = json.loads((tmp_path / "m.json").read_text())
    assert set(data) == {"rank_ic", "rank_icir", "apy", "cw", "cr", "asr", "mdd", "avo", "n_days", "annualization"}
    only_ic = build_report(preds, None)
    assert only_ic.cw is None and only_ic.n_days == 2
