"""Price-ratio pairs trading: rolling z-score signals, equal-notional long/short
legs with stop-loss and proportional costs, lookback grid search and per-query
aggregation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

FLAT, LONG, SHORT = 0, 1, -1
STATE_NAMES = {FLAT: "flat", LONG: "long-spread", SHORT: "short-spread"}

DEFAULT_L1_GRID = (5, 10, 20, 40)
DEFAULT_L2_GRID = (20, 40, 60, 120)


@dataclass(frozen=True)
class PairConfig:
    L1: int = 20
    L2: int = 60
    entry: float = 1.25
    exit: float = 0.5
    stop_loss: float = 500.0
    stop_mode: str = "relative"  # or "absolute": wealth floor at stop_loss
    capital: float = 10_000.0
    cost_rate: float = 0.001

    def __post_init__(self):
        if self.L1 < 2 or self.L2 < 2:
            raise ValueError("lookbacks must be >= 2")
        if not self.entry > self.exit > 0:
            raise ValueError("need entry > exit > 0")
        if self.capital <= 0:
            raise ValueError("capital must be positive")
        if self.cost_rate < 0:
            raise ValueError("cost rate must be non-negative")
        if self.stop_mode not in ("relative", "absolute"):
            raise ValueError("stop_mode must be 'relative' or 'absolute'")


def _rolling(x: np.ndarray, L: int) -> tuple[np.ndarray, np.ndarray]:
    mean = np.full(len(x), np.nan)
    std = np.full(len(x), np.nan)
    if L <= len(x):
        win = np.lib.stride_tricks.sliding_window_view(x, L)
        m = win.mean(axis=1)
        mean[L - 1 :] = m
        std[L - 1 :] = np.sqrt(((win - m[:, None]) ** 2).mean(axis=1))
    return mean, std


def zscore_series(pq, ps, L1: int, L2: int) -> np.ndarray:
    """``(mean_L1(PR) - mean_L2(PR)) / std_L2(PR)`` with population std; NaN where undefined.

    A window whose std vanishes (to 1e-12 relative) gives no signal.
    """
    pq = np.asarray(pq, dtype=float)
    ps = np.asarray(ps, dtype=float)
    if pq.shape != ps.shape or pq.ndim != 1:
        raise ValueError("price series must be aligned 1-d arrays")
    if len(pq) < max(L1, L2):
        raise ValueError(f"series of length {len(pq)} too short for lookbacks {L1}, {L2}")
    pr = pq / ps
    m1, _ = _rolling(pr, L1)
    m2, s2 = _rolling(pr, L2)
    flat = s2 <= 1e-12 * np.abs(m2)
    with np.errstate(invalid="ignore", divide="ignore"):
        z = (m1 - m2) / s2
    z[flat | np.isnan(m1) | np.isnan(s2)] = np.nan
    if np.any(flat):
        logger.debug("%d days with zero ratio dispersion; no signal", int(flat.sum()))
    return z


def _decide(state: int, z: float, entry: float, exit_: float, armed: bool) -> Optional[str]:
    if math.isnan(z):
        return None
    if state == FLAT:
        if not armed:
            return None
        if z > entry:
            return "open_short"
        if z < -entry:
            return "open_long"
        return None
    if -exit_ <= z <= exit_:
        return "close"
    return None


def generate_signals(z, config: PairConfig = PairConfig()) -> list[tuple[int, str]]:
    """Entry/exit events ``(index, kind)`` from the threshold rule alone (no stop-loss)."""
    state, events = FLAT, []
    for t, zt in enumerate(np.asarray(z, dtype=float)):
        action = _decide(state, zt, config.entry, config.exit, True)
        if action is None:
            continue
        events.append((t, action))
        state = {"open_short": SHORT, "open_long": LONG, "close": FLAT}[action]
    return events


@dataclass
class TradeLedger:
    frame: pd.DataFrame
    events: list[dict] = field(default_factory=list)
    capital: float = 10_000.0

    @property
    def wealth(self) -> np.ndarray:
        return self.frame["wealth"].to_numpy()

    @property
    def terminal_wealth(self) -> float:
        return float(self.frame["wealth"].iloc[-1])

    @property
    def pnl(self) -> float:
        return self.terminal_wealth - self.capital

    @property
    def n_entries(self) -> int:
        return sum(e["kind"].startswith("open") for e in self.events)

    @property
    def has_signals(self) -> bool:
        return self.n_entries > 0

    @property
    def mdd(self) -> float:
        return max_drawdown(self.wealth)

    def to_csv(self, path, header: str = "") -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header + "\n")
            self.frame.to_csv(fh, float_format="%.10g")


def max_drawdown(wealth) -> float:
    """Largest peak-to-trough decline in percent (<= 0)."""
    w = np.asarray(wealth, dtype=float)
    if len(w) == 0:
        return 0.0
    peak = np.maximum.accumulate(w)
    return float(np.min(w / peak - 1.0) * 100.0)


def backtest_pair(pq, ps, config: PairConfig = PairConfig(), dates=None, start: int = 0) -> TradeLedger:
    """Trade the pair at same-day closes from index ``start`` onwards.

    The z-score uses the full series, so history before ``start`` only
    warms up the lookbacks. Each leg's notional is half the wealth at entry;
    every leg trade pays ``cost_rate`` times its notional. After a stop-loss
    no new entry is taken until the z-score has returned inside the exit band.
    """
    pq = np.asarray(pq, dtype=float)
    ps = np.asarray(ps, dtype=float)
    z = zscore_series(pq, ps, config.L1, config.L2)
    n = len(pq)
    index = pd.DatetimeIndex(dates) if dates is not None else pd.RangeIndex(n)
    cash = config.capital
    uq = us = 0.0
    state, armed = FLAT, True
    entry_wealth = config.capital
    cum_cost = 0.0
    rows, events = [], []

    def trade(dq: float, dsh: float, t: int) -> float:
        nonlocal cash, uq, us, cum_cost
        notional = abs(dq) * pq[t] + abs(dsh) * ps[t]
        cost = config.cost_rate * notional
        cash -= dq * pq[t] + dsh * ps[t] + cost
        uq += dq
        us += dsh
        cum_cost += cost
        return cost

    for t in range(n):
        if t >= start and (not pq[t] > 0 or not ps[t] > 0):
            raise ValueError(
                f"non-positive price at index {t} ({index[t]}): pq={pq[t]}, ps={ps[t]}, "
                f"state={STATE_NAMES[state]}"
            )
        wealth = cash + uq * pq[t] + us * ps[t]
        if t >= start:
            zt = z[t]
            if state != FLAT and not math.isnan(zt) and -config.exit <= zt <= config.exit:
                armed = True
            if state == FLAT and not armed and not math.isnan(zt) and abs(zt) <= config.exit:
                armed = True
            stop = False
            if state != FLAT:
                floor = (entry_wealth - config.stop_loss if config.stop_mode == "relative"
                         else config.stop_loss)
                stop = wealth < floor
            action = "stop" if stop else _decide(state, zt, config.entry, config.exit, armed)
            if action in ("close", "stop"):
                cost = trade(-uq, -us, t)
                uq = us = 0.0
                state = FLAT
                if action == "stop":
                    armed = False
                events.append({"t": t, "date": index[t], "kind": action, "z": zt, "cost": cost})
            elif action in ("open_long", "open_short"):
                entry_wealth = wealth
                half = wealth / 2.0
                sign = 1.0 if action == "open_long" else -1.0
                cost = trade(sign * half / pq[t], -sign * half / ps[t], t)
                state = LONG if action == "open_long" else SHORT
                events.append({"t": t, "date": index[t], "kind": action, "z": zt, "cost": cost})
        wealth = cash + uq * pq[t] + us * ps[t]
        rows.append((z[t], STATE_NAMES[state], uq, us, cash, cum_cost, wealth))
    frame = pd.DataFrame(rows, index=index,
                         columns=["z", "state", "units_q", "units_s", "cash", "cost", "wealth"])
    frame.index.name = "date"
    return TradeLedger(frame.iloc[start:], events, config.capital)


@dataclass
class GridResult:
    L1: int
    L2: int
    wealth: float
    tradable: bool
    table: pd.DataFrame


def grid_search(
    pq,
    ps,
    L1_grid: Sequence[int] = DEFAULT_L1_GRID,
    L2_grid: Sequence[int] = DEFAULT_L2_GRID,
    train: Optional[tuple[int, int]] = None,
    config: PairConfig = PairConfig(),
    require_l2_gt_l1: bool = True,
) -> GridResult:
    """Backtest every lookback cell on the training slice ``[lo, hi)``; keep the
    highest terminal wealth (ties: smaller L1, then smaller L2)."""
    if not L1_grid or not L2_grid:
        raise ValueError("grids must be non-empty")
    pq = np.asarray(pq, dtype=float)
    ps = np.asarray(ps, dtype=float)
    lo, hi = train if train is not None else (0, len(pq))
    if not 0 <= lo < hi <= len(pq):
        raise ValueError("training range outside data")
    rows = []
    for L1 in sorted(L1_grid):
        for L2 in sorted(L2_grid):
            if require_l2_gt_l1 and L2 <= L1:
                continue
            if hi - lo < max(L1, L2):
                continue
            ledger = backtest_pair(pq[lo:hi], ps[lo:hi], replace(config, L1=L1, L2=L2))
            rows.append({"L1": L1, "L2": L2, "wealth": ledger.terminal_wealth,
                         "entries": ledger.n_entries})
    if not rows:
        raise ValueError("no admissible grid cell for the training length")
    table = pd.DataFrame(rows)
    best = rows[0]
    for row in rows[1:]:
        if row["wealth"] > best["wealth"]:
            best = row
    tradable = bool((table["entries"] > 0).any())
    if not tradable:
        logger.warning("no tradable configuration")
    return GridResult(best["L1"], best["L2"], best["wealth"], tradable, table)


@dataclass
class PairAggregate:
    query: str
    similar: list[str]
    mean_pnl: float
    std_pnl: float
    mean_mdd: float
    n_used: int
    excluded: list[str]
    annotation: str  # "", "NaN*" (some pairs silent) or "NaN**" (all silent)


def aggregate_query(query: str, similar: Sequence[str], ledgers: Sequence[TradeLedger]) -> PairAggregate:
    """Average terminal P&L and MDD over the pairs that produced signals."""
    if len(ledgers) != len(similar) or len(ledgers) > 3:
        raise ValueError("need one ledger per similar stock, at most 3")
    used = [(s, l) for s, l in zip(similar, ledgers) if l.has_signals]
    excluded = [s for s, l in zip(similar, ledgers) if not l.has_signals]
    if not used:
        return PairAggregate(query, list(similar), math.nan, math.nan, math.nan, 0, excluded, "NaN**")
    pnl = np.array([l.pnl for _, l in used])
    mdd = np.array([l.mdd for _, l in used])
    return PairAggregate(
        query,
        list(similar),
        float(pnl.mean()),
        float(pnl.std()),
        float(mdd.mean()),
        len(used),
        excluded,
        "NaN*" if excluded else "",
    )
