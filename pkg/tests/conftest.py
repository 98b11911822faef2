import numpy as np
import pytest
import torch

from storm.config import LossWeights, StormConfig
from storm.market_data import FeaturePanel


def panel_from_close(close, start="2020-01-01", tickers=None) -> FeaturePanel:
    """Raw panel whose OHLC all equal ``close`` (volume 1e6)."""
    close = np.asarray(close, dtype=np.float64)
    if close.ndim == 1:
        close = close[:, None]
    T, N = close.shape
    values = np.stack([close, close, close, close, np.full_like(close, 1e6)], axis=-1)
    dates = np.arange(np.datetime64(start, "D"), np.datetime64(start, "D") + T)
    tickers = tickers or [f"T{i}" for i in range(N)]
    return FeaturePanel(dates, tickers, values, ["open", "high", "low", "close", "volume"], d1=5)


@pytest.fixture
def tiny_cfg():
    return StormConfig(
        n_stocks=3, n_features=4, W=8, p=2, H=16, K_ts=8, K_cs=8, K_f=4,
        enc_layers=1, enc_heads=2, dec_layers=1, dec_heads=2, weights=LossWeights(recon=1.0),
    )


@pytest.fixture
def tiny_batch():
    g = torch.Generator().manual_seed(0)
    return torch.randn(5, 8, 3, 4, generator=g), 0.01 * torch.randn(5, 3, generator=g)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion and assert it."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
