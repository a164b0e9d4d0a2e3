"""Deterministic synthetic data: drifting feature domains, factor-model price
panels, mean-reverting pairs and regime-switching return panels."""
from __future__ import annotations

import numpy as np
import pandas as pd

from .data import (
    DEFAULT_WINDOWS,
    DomainSequence,
    FeatureSeries,
    PricePanel,
    build_domains,
    temporal_variants,
)


def _rotation(dim: int, angle: float) -> np.ndarray:
    R = np.eye(dim)
    for a in range(0, dim - 1, 2):
        c, s = np.cos(angle), np.sin(angle)
        R[a : a + 2, a : a + 2] = [[c, -s], [s, c]]
    if dim % 2:
        R[-1, -1] = np.cos(angle)
    return R


def drifting_features(
    n_tickers: int = 40,
    n_domains: int = 9,
    days_per_domain: int = 60,
    rho: float = 0.9,
    step_angle: float = np.pi / 8,
    scale: float = 0.02,
    n_sectors: int = 3,
    seed: int = 0,
) -> tuple[FeatureSeries, dict[str, str], list[tuple[pd.Timestamp, pd.Timestamp]]]:
    """Vector AR(1) features whose transition matrix ``rho * R(s * step_angle)``
    rotates from one domain to the next.

    Returns the feature series, sector labels and the per-domain date ranges.
    A burn-in of 30 days precedes the first domain so trailing windows fill.
    """
    rng = np.random.default_rng(seed)
    dim = 5
    burn = 30
    n_days = burn + n_domains * days_per_domain
    dates = pd.bdate_range("2018-01-01", periods=n_days)
    x = np.zeros((n_tickers, n_days, dim))
    state = rng.normal(0, scale, size=(n_tickers, dim))
    noise_sd = scale * np.sqrt(1 - rho**2)
    for t in range(n_days):
        s = max(0, (t - burn) // days_per_domain)
        A = rho * _rotation(dim, s * step_angle)
        state = state @ A.T + rng.normal(0, noise_sd, size=(n_tickers, dim))
        x[:, t] = state
    tickers = [f"S{i:03d}" for i in range(n_tickers)]
    sectors = {t: f"sec{i % n_sectors}" for i, t in enumerate(tickers)}
    schedule = [
        (dates[burn + s * days_per_domain], dates[burn + (s + 1) * days_per_domain - 1])
        for s in range(n_domains)
    ]
    return FeatureSeries(tickers, dates, x), sectors, schedule


def drifting_domains(windows=DEFAULT_WINDOWS, **kwargs) -> tuple[DomainSequence, tuple[str, ...]]:
    feats, sectors, schedule = drifting_features(**kwargs)
    variants = temporal_variants(feats, windows)
    seq = build_domains(variants, sectors, schedule)
    return seq, tuple(sorted(set(sectors.values())))


def synthetic_panel(
    n_tickers: int = 50,
    start: str = "2018-01-01",
    end: str = "2023-12-31",
    n_sectors: int = 5,
    seed: int = 0,
    n_duplicates: int = 0,
    delist: int = 2,
    late_list: int = 2,
) -> PricePanel:
    """Sector-factor GBM panel with OHLCV.

    ``delist`` tickers stop trading midway and ``late_list`` tickers start late.
    ``n_duplicates`` extra tickers (suffix ``_DUP``) copy the first tickers exactly.
    """
    rng = np.random.default_rng(seed)
    dates = pd.bdate_range(start, end)
    n_days = len(dates)
    market = rng.normal(0.0003, 0.01, size=n_days)
    sector_f = rng.normal(0.0, 0.008, size=(n_sectors, n_days))
    sec_of = np.arange(n_tickers) % n_sectors
    beta = rng.uniform(0.6, 1.4, size=n_tickers)
    # sector loadings drift slowly over time so similarity structure is non-stationary
    load = 1.0 + 0.5 * np.sin(np.linspace(0, 3 * np.pi, n_days)[None, :] + rng.uniform(0, 6, (n_tickers, 1)))
    idio = rng.normal(0.0, 0.012, size=(n_tickers, n_days))
    rets = beta[:, None] * market[None, :] + load * sector_f[sec_of] + idio
    close = 20.0 * np.exp(np.cumsum(rets, axis=1)) * rng.uniform(1, 10, size=(n_tickers, 1))
    gap = rng.normal(0, 0.004, size=close.shape)
    open_ = np.roll(close, 1, axis=1) * np.exp(gap)
    open_[:, 0] = close[:, 0] * np.exp(gap[:, 0])
    span = np.abs(rng.normal(0, 0.008, size=close.shape))
    high = np.maximum(open_, close) * np.exp(span)
    low = np.minimum(open_, close) * np.exp(-np.abs(rng.normal(0, 0.008, size=close.shape)))
    volume = np.round(rng.lognormal(13, 0.4, size=close.shape))
    mask = np.ones(close.shape, dtype=bool)
    for i in range(min(delist, n_tickers)):
        mask[n_tickers - 1 - i, n_days // 2 + 40 * i :] = False
    for i in range(min(late_list, n_tickers - delist)):
        mask[n_tickers - 1 - delist - i, : n_days // 4 + 40 * i] = False
    tickers = [f"T{i:03d}" for i in range(n_tickers)]
    sectors = {t: f"SEC{sec_of[i]}" for i, t in enumerate(tickers)}
    arrays = {"open": open_, "high": high, "low": low, "close": close, "volume": volume}
    if n_duplicates:
        dup = list(range(n_duplicates))
        tickers += [f"{tickers[i]}_DUP" for i in dup]
        for t in dup:
            sectors[f"T{t:03d}_DUP"] = sectors[tickers[t]]
        arrays = {k: np.vstack([v, v[dup]]) for k, v in arrays.items()}
        mask = np.vstack([mask, mask[dup]])
    for k in arrays:
        arrays[k] = np.where(mask, arrays[k], np.nan)
    return PricePanel(tickers=tickers, dates=dates, **arrays, sectors=sectors, mask=mask)


def ou_ratio_pair(
    n_days: int = 500,
    theta: float = 0.1,
    sigma: float = 0.02,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Prices ``(pq, ps)`` sharing a geometric random walk; ``log(pq/ps)`` is OU."""
    rng = np.random.default_rng(seed)
    common = 50.0 * np.exp(np.cumsum(rng.normal(0.0002, 0.01, size=n_days)))
    x = np.zeros(n_days)
    for t in range(1, n_days):
        x[t] = x[t - 1] - theta * x[t - 1] + sigma * rng.normal()
    ratio = np.exp(x)
    return common * np.sqrt(ratio), common / np.sqrt(ratio)


def regime_returns(
    n_assets: int = 6,
    n_months: int = 96,
    switch_every: int = 12,
    vol: float = 0.06,
    rho: float = 0.8,
    seed: int = 0,
) -> tuple[pd.DataFrame, list[np.ndarray]]:
    """Monthly returns whose correlation alternates between two block structures.

    Returns the frame and the true correlation matrix of every month.
    """
    rng = np.random.default_rng(seed)
    half = n_assets // 2
    a = np.full((n_assets, n_assets), 0.0)
    a[:half, :half] = rho
    a[half:, half:] = rho
    b = np.full((n_assets, n_assets), 0.0)
    idx = np.arange(n_assets)
    b[np.ix_(idx % 2 == 0, idx % 2 == 0)] = rho
    b[np.ix_(idx % 2 == 1, idx % 2 == 1)] = rho
    np.fill_diagonal(a, 1.0)
    np.fill_diagonal(b, 1.0)
    corrs, rows = [], []
    for m in range(n_months):
        C = a if (m // switch_every) % 2 == 0 else b
        corrs.append(C)
        L = np.linalg.cholesky(C)
        rows.append(0.005 + vol * (L @ rng.normal(size=n_assets)))
    months = pd.period_range("2016-01", periods=n_months, freq="M").to_timestamp()
    frame = pd.DataFrame(rows, index=months, columns=[f"A{i}" for i in range(n_assets)])
    return frame, corrs
