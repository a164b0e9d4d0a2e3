"""Index tracking with equal-weighted portfolios of the most similar stocks."""
from __future__ import annotations

import logging
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .evaluation import cumulative

logger = logging.getLogger(__name__)

K_GRID = (10, 15, 20, 25, 30, 35)


def equal_weight_returns(members: Sequence[str], returns: pd.DataFrame, rebalance: str = "hold") -> pd.Series:
    """Equal-weight portfolio return series over ``members``.

    ``rebalance="hold"`` (default) sets equal weights once at the start and
    lets them drift; ``"period"`` averages member returns every period. Members
    with any missing value are dropped and listed in ``series.attrs["dropped"]``.
    """
    members = list(dict.fromkeys(members))
    if not members:
        raise ValueError("empty member list")
    if rebalance not in ("period", "hold"):
        raise ValueError("rebalance must be 'period' or 'hold'")
    missing = [m for m in members if m not in returns.columns]
    present = [m for m in members if m in returns.columns]
    gaps = [m for m in present if returns[m].isna().any()]
    dropped = missing + gaps
    keep = [m for m in present if m not in gaps]
    if dropped:
        logger.warning("dropping members without full data: %s", dropped)
    if not keep:
        raise ValueError(f"no member has full data (dropped {dropped})")
    R = returns[keep].to_numpy(dtype=float)
    if rebalance == "period":
        out = R.mean(axis=1)
    else:
        # weights drift with each member's growth since the start
        prev = np.vstack([np.ones((1, R.shape[1])), np.cumprod(1.0 + R, axis=0)[:-1]])
        out = (prev / prev.sum(axis=1, keepdims=True) * R).sum(axis=1)
    series = pd.Series(out, index=returns.index, name="portfolio")
    series.attrs["dropped"] = dropped
    series.attrs["members"] = keep
    return series


def _pair(RI, RP) -> tuple[np.ndarray, np.ndarray]:
    RI = np.asarray(RI, dtype=float)
    RP = np.asarray(RP, dtype=float)
    if RI.shape != RP.shape or RI.ndim != 1:
        raise ValueError(f"length mismatch: {RI.shape} vs {RP.shape}")
    return RI, RP


def tracking_error(RI, RP) -> float:
    """Root-mean-square gap between two cumulative return paths."""
    RI, RP = _pair(RI, RP)
    if len(RI) < 1:
        raise ValueError("need at least one period")
    return float(np.sqrt(np.mean((RI - RP) ** 2)))


def tracking_error_volatility(RI, RP) -> float:
    """Population standard deviation of the difference series ``RI - RP``."""
    RI, RP = _pair(RI, RP)
    if len(RI) < 2:
        raise ValueError("need at least two periods")
    diff = RI - RP
    return float(np.sqrt(np.mean((diff - diff.mean()) ** 2)))


def track_one(target: pd.Series, members: Sequence[str], returns: pd.DataFrame,
              rebalance: str = "hold", tev_on: str = "cumulative") -> dict:
    """TE/TEV of an equal-weight portfolio against ``target`` period returns."""
    if tev_on not in ("cumulative", "period"):
        raise ValueError("tev_on must be 'cumulative' or 'period'")
    port = equal_weight_returns(members, returns, rebalance)
    t = target.to_numpy(dtype=float)
    p = port.to_numpy()
    if np.isnan(t).any():
        raise ValueError(f"target {target.name} has missing returns")
    RI, RP = cumulative(t), cumulative(p)
    tev = (tracking_error_volatility(RI, RP) if tev_on == "cumulative"
           else tracking_error_volatility(t, p))
    return {"TE": tracking_error(RI, RP), "TEV": tev, "n": len(t),
            "n_members": len(port.attrs["members"]), "dropped": ";".join(port.attrs["dropped"])}


def track_report(
    targets: Sequence[str],
    methods: Sequence[str],
    rankings: Mapping[tuple[str, str, str], Sequence[str]],
    returns: pd.DataFrame,
    k_grid: Sequence[int] = K_GRID,
    exchanges: Sequence[str] = ("",),
    target_returns: pd.DataFrame | None = None,
    rebalance: str = "hold",
    tev_on: str = "cumulative",
) -> pd.DataFrame:
    """Cross product of (target, method, exchange, k) with TE and TEV.

    ``rankings[(target, method, exchange)]`` is the ranked neighbour list;
    the portfolio uses its first ``k`` entries. Within each
    (target, exchange, k) group methods are ranked, 1 = best (lowest).
    """
    target_returns = returns if target_returns is None else target_returns
    rows = []
    for target in targets:
        for method in methods:
            for exchange in exchanges:
                ranked = list(rankings[(target, method, exchange)])
                for k in k_grid:
                    if k > len(ranked):
                        logger.warning("only %d neighbours for %s/%s/%s, k=%d", len(ranked),
                                       target, method, exchange, k)
                    res = track_one(target_returns[target], ranked[:k], returns, rebalance, tev_on)
                    rows.append({"target": target, "method": method, "exchange": exchange, "k": k, **res})
    report = pd.DataFrame(rows)
    group = report.groupby(["target", "exchange", "k"])
    for col in ("TE", "TEV"):
        report[f"{col}_rank"] = group[col].rank(method="min").astype(int)
    return report
