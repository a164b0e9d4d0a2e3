import math

import numpy as np
import pytest

from simstock.pairs import (
    PairConfig,
    aggregate_query,
    backtest_pair,
    generate_signals,
    grid_search,
    max_drawdown,
    zscore_series,
)


def test_zscore_hand_example():
    pr = np.array([1.0, 1.0, 1.0, 2.0])
    z = zscore_series(pr, np.ones(4), 2, 4)
    assert np.isnan(z[:3]).all()
    assert z[3] == pytest.approx(0.5774, abs=1e-4)


def test_zscore_too_short():
    with pytest.raises(ValueError):
        zscore_series(np.ones(3), np.ones(3), 2, 4)


def test_zscore_flat_ratio_is_nan():
    p = np.linspace(10, 20, 50)
    assert np.isnan(zscore_series(2 * p, p, 5, 20)).all()


def test_signal_trace():
    z = [np.nan, -1.3, -0.4, 0.0, 1.4, 0.3]
    events = generate_signals(z, PairConfig())
    assert events == [(1, "open_long"), (2, "close"), (4, "open_short"), (5, "close")]


def test_no_reentry_while_open():
    z = [1.4, 1.6, 2.0, 0.4]
    assert generate_signals(z, PairConfig()) == [(0, "open_short"), (3, "close")]


def test_max_drawdown_example():
    assert max_drawdown([100, 120, 90, 130]) == pytest.approx(-25.0)
    assert max_drawdown([1, 2, 3]) == 0.0


def _pair(seed=0, n=300):
    rng = np.random.default_rng(seed)
    common = np.cumsum(rng.normal(0, 0.01, n))
    return (30 * np.exp(common + np.cumsum(rng.normal(0, 0.01, n))),
            40 * np.exp(common + np.cumsum(rng.normal(0, 0.01, n))))


def test_costs_are_charged_per_leg():
    pq, ps = _pair(1)
    free = backtest_pair(pq, ps, PairConfig(L1=5, L2=40, cost_rate=0.0))
    paid = backtest_pair(pq, ps, PairConfig(L1=5, L2=40, cost_rate=0.001))
    assert free.n_entries > 0
    assert free.frame["cost"].iloc[-1] == 0.0
    first = paid.events[0]
    # both legs of the opening trade carry half the wealth each
    assert first["cost"] == pytest.approx(0.001 * paid.capital)
    assert [e["t"] for e in free.events] == [e["t"] for e in paid.events]


def test_stop_loss_closes_and_disarms():
    n = 120
    ps = np.full(n, 50.0)
    pq = 50.0 * np.exp(0.002 * np.sin(np.arange(n) / 3.0))
    pq[60:] = pq[60] * np.exp(0.03 * np.arange(n - 60))  # the spread runs away after entry
    ledger = backtest_pair(pq, ps, PairConfig(L1=2, L2=20, stop_loss=100.0))
    kinds = [e["kind"] for e in ledger.events]
    assert "stop" in kinds
    stop_t = next(e["t"] for e in ledger.events if e["kind"] == "stop")
    assert ledger.frame["state"].iloc[stop_t] == "flat"
    z = ledger.frame["z"].to_numpy()
    reopen = [e["t"] for e in ledger.events if e["t"] > stop_t and e["kind"].startswith("open")]
    if reopen:
        # re-entry only after the z-score passed back through the exit band
        assert (np.abs(z[stop_t + 1 : reopen[0]]) <= 0.5).any()


def test_non_positive_price_raises():
    pq, ps = _pair()
    pq[100] = 0.0
    with pytest.raises(ValueError, match="index 100"):
        backtest_pair(pq, ps, PairConfig(L1=5, L2=40))


def test_start_skips_history():
    pq, ps = _pair(2)
    ledger = backtest_pair(pq, ps, PairConfig(L1=5, L2=40), start=100)
    assert len(ledger.frame) == 200
    assert all(e["t"] >= 100 for e in ledger.events)


def test_grid_picks_strict_maximizer():
    pq, ps = _pair(3, 400)
    grid = grid_search(pq, ps, L1_grid=[5, 10], L2_grid=[20, 40], train=(0, 400))
    table = grid.table
    best = table.loc[table["wealth"].idxmax()]
    assert (grid.L1, grid.L2) == (best["L1"], best["L2"])
    assert len(table) == 4


def test_grid_tie_breaks_to_smaller_lookbacks(caplog):
    p = np.linspace(10, 20, 200)
    grid = grid_search(2 * p, p, L1_grid=[10, 5], L2_grid=[40, 20], train=(0, 200))
    assert (grid.L1, grid.L2) == (5, 20)
    assert not grid.tradable
    assert "no tradable configuration" in caplog.text


def test_aggregate_semantics():
    pq, ps = _pair(4)
    p = np.linspace(10, 20, 300)
    active = backtest_pair(pq, ps, PairConfig(L1=5, L2=40))
    silent = backtest_pair(2 * p, p, PairConfig(L1=5, L2=40))
    full = aggregate_query("Q", ["A", "B"], [active, active])
    assert full.annotation == "" and full.n_used == 2 and full.std_pnl == 0.0
    some = aggregate_query("Q", ["A", "B"], [silent, active])
    assert some.annotation == "NaN*" and some.mean_pnl == pytest.approx(active.pnl)
    none = aggregate_query("Q", ["A"], [silent])
    assert none.annotation == "NaN**" and math.isnan(none.mean_pnl)
    with pytest.raises(ValueError):
        aggregate_query("Q", list("ABCD"), [active] * 4)


def test_config_validation():
    with pytest.raises(ValueError):
        PairConfig(entry=0.5, exit=1.0)
    with pytest.raises(ValueError):
        PairConfig(stop_mode="trailing")
