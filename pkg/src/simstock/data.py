"""Price-panel ingestion, normalized price features, trailing-window variants
and the time-ordered domain sequence used for training."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

PRICE_COLUMNS = ("open", "high", "low", "close", "volume")
FEATURE_NAMES = ("z_open", "z_high", "z_low", "z_close", "z_volume")
DEFAULT_WINDOWS = (5, 10, 15, 20, 25)


class PanelError(ValueError):
    """Raised for malformed or inconsistent panel input."""


class EmptyDomainError(ValueError):
    pass


@dataclass
class PricePanel:
    """Daily OHLCV panel on a common trading calendar.

    Price/volume arrays have shape ``(n_tickers, n_dates)`` and hold NaN where
    the ticker was not listed or did not trade (``mask`` is False there).
    """

    tickers: list[str]
    dates: pd.DatetimeIndex
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray
    sectors: dict[str, str]
    mask: np.ndarray

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.dates.is_monotonic_increasing or self.dates.has_duplicates:
            raise PanelError("dates must be strictly increasing without duplicates")
        if len(set(self.tickers)) != len(self.tickers):
            raise PanelError("duplicate ticker in panel")
        shape = (len(self.tickers), len(self.dates))
        for name in PRICE_COLUMNS:
            arr = getattr(self, name)
            if arr.shape != shape:
                raise PanelError(f"{name} has shape {arr.shape}, expected {shape}")
        m = self.mask
        for name in ("open", "high", "low", "close"):
            arr = getattr(self, name)
            if np.any(~np.isfinite(arr[m])) or np.any(arr[m] <= 0):
                i, j = np.argwhere(m & ~(arr > 0))[0]
                raise PanelError(
                    f"non-positive {name} price for {self.tickers[i]} on {self.dates[j].date()}"
                )
        if np.any(self.volume[m] < 0):
            i, j = np.argwhere(m & (self.volume < 0))[0]
            raise PanelError(f"negative volume for {self.tickers[i]} on {self.dates[j].date()}")
        missing = [t for t in self.tickers if t not in self.sectors]
        if missing:
            raise PanelError(f"no sector for tickers {missing}")

    @property
    def n_tickers(self) -> int:
        return len(self.tickers)

    def index_of(self, ticker: str) -> int:
        try:
            return self.tickers.index(ticker)
        except ValueError:
            raise KeyError(f"unknown ticker {ticker!r}") from None

    def close_frame(self) -> pd.DataFrame:
        """Close prices as a dates x tickers frame (NaN where absent)."""
        return pd.DataFrame(self.close.T, index=self.dates, columns=self.tickers)

    def returns_frame(self) -> pd.DataFrame:
        """Close-to-close simple returns; NaN where either day is absent."""
        close = self.close_frame()
        return close / close.shift(1) - 1.0

    def subset(self, tickers: Sequence[str]) -> "PricePanel":
        idx = [self.index_of(t) for t in tickers]
        return PricePanel(
            tickers=list(tickers),
            dates=self.dates,
            **{name: getattr(self, name)[idx] for name in PRICE_COLUMNS},
            sectors={t: self.sectors[t] for t in tickers},
            mask=self.mask[idx],
        )

    def to_frame(self) -> pd.DataFrame:
        """Long-format rows (date, ticker, open, ..., volume, sector) for present cells."""
        ti, di = np.nonzero(self.mask)
        frame = pd.DataFrame(
            {
                "date": self.dates[di].strftime("%Y-%m-%d"),
                "ticker": np.asarray(self.tickers, dtype=object)[ti],
                **{name: getattr(self, name)[ti, di] for name in PRICE_COLUMNS},
            }
        )
        frame["sector"] = frame["ticker"].map(self.sectors)
        return frame.sort_values(["date", "ticker"], kind="stable").reset_index(drop=True)


def from_frame(frame: pd.DataFrame, sectors: dict[str, str] | None = None) -> PricePanel:
    """Build a panel from long-format rows with columns date,ticker,open..volume[,sector]."""
    frame = frame.copy()
    frame["date"] = pd.to_datetime(frame["date"])
    dup = frame.duplicated(["ticker", "date"])
    if dup.any():
        row = frame[dup].iloc[0]
        raise PanelError(f"duplicate row for ticker {row['ticker']} on {row['date'].date()}")
    if sectors is None:
        if "sector" not in frame.columns:
            raise PanelError("no sector column and no sector mapping supplied")
        sectors = {}
        for ticker, sec in frame.groupby("ticker")["sector"]:
            values = sec.unique()
            if len(values) != 1:
                raise PanelError(f"ticker {ticker} has conflicting sectors {list(values)}")
            sectors[str(ticker)] = str(values[0])
    tickers = sorted(frame["ticker"].astype(str).unique())
    dates = pd.DatetimeIndex(sorted(frame["date"].unique()))
    t_pos = {t: i for i, t in enumerate(tickers)}
    ti = frame["ticker"].astype(str).map(t_pos).to_numpy()
    di = dates.get_indexer(frame["date"])
    shape = (len(tickers), len(dates))
    arrays = {}
    for name in PRICE_COLUMNS:
        arr = np.full(shape, np.nan)
        arr[ti, di] = frame[name].to_numpy(dtype=float)
        arrays[name] = arr
    mask = np.zeros(shape, dtype=bool)
    mask[ti, di] = True
    return PricePanel(tickers=tickers, dates=dates, **arrays, sectors=sectors, mask=mask)


def load_sectors(path: str | Path) -> dict[str, str]:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(frame.columns[:2]) != ["ticker", "sector"]:
        raise PanelError(f"{path}: sector file needs header 'ticker,sector'")
    return dict(zip(frame["ticker"], frame["sector"]))


def load_panel(path: str | Path, sector_path: str | Path | None = None) -> PricePanel:
    """Read a headered CSV with one row per ticker-date.

    Rows absent from the file are masked out. Parse errors report the 1-based
    file line number (header is line 1).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as exc:
        raise PanelError(f"{path}: {exc}") from exc
    required = ["date", "ticker", *PRICE_COLUMNS]
    missing = [c for c in required if c not in raw.columns]
    if missing:
        raise PanelError(f"{path}: missing columns {missing}")

    parsed = pd.DataFrame({"ticker": raw["ticker"].str.strip()})
    parsed["date"] = pd.to_datetime(raw["date"], format="%Y-%m-%d", errors="coerce")
    for name in PRICE_COLUMNS:
        parsed[name] = pd.to_numeric(raw[name], errors="coerce")
    bad = parsed[["date", *PRICE_COLUMNS]].isna().any(axis=1) | (parsed["ticker"] == "")
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise PanelError(f"{path}: line {i + 2}: malformed row {raw.iloc[i].tolist()}")
    for name in ("open", "high", "low", "close"):
        nonpos = parsed[name] <= 0
        if nonpos.any():
            i = int(np.flatnonzero(nonpos.to_numpy())[0])
            raise PanelError(
                f"{path}: line {i + 2}: non-positive {name} for ticker "
                f"{parsed['ticker'].iloc[i]} on {raw['date'].iloc[i]}"
            )
    dup = parsed.duplicated(["ticker", "date"])
    if dup.any():
        i = int(np.flatnonzero(dup.to_numpy())[0])
        raise PanelError(
            f"{path}: line {i + 2}: duplicate ticker-date "
            f"{parsed['ticker'].iloc[i]} {raw['date'].iloc[i]}"
        )
    sectors = None
    if sector_path is not None:
        sectors = load_sectors(sector_path)
    elif "sector" in raw.columns:
        parsed["sector"] = raw["sector"]
    return from_frame(parsed, sectors)


@dataclass
class FeatureSeries:
    """Normalized daily features, shape ``(n_tickers, n_dates, 5)``; NaN = undefined."""

    tickers: list[str]
    dates: pd.DatetimeIndex
    values: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.values).any(axis=-1)


def normalize_features(panel: PricePanel) -> FeatureSeries:
    """Intraday ratios to the close plus day-over-day close and volume changes.

    The previous day is the previous calendar date of the panel; a ticker absent
    on that date has undefined close/volume changes. Zero prior volume leaves the
    volume change undefined (the sample becomes ineligible).
    """
    c = panel.close
    values = np.full((*c.shape, len(FEATURE_NAMES)), np.nan)
    values[..., 0] = panel.open / c - 1.0
    values[..., 1] = panel.high / c - 1.0
    values[..., 2] = panel.low / c - 1.0
    values[:, 1:, 3] = c[:, 1:] / c[:, :-1] - 1.0
    prev_vol = panel.volume[:, :-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        vol_change = panel.volume[:, 1:] / prev_vol - 1.0
    vol_change[~(prev_vol > 0)] = np.nan
    values[:, 1:, 4] = vol_change
    values[~panel.mask] = np.nan
    return FeatureSeries(list(panel.tickers), panel.dates, values)


@dataclass
class VariantSeries:
    """Concatenated trailing-mean blocks, shape ``(n_tickers, n_dates, 5 * k)``."""

    tickers: list[str]
    dates: pd.DatetimeIndex
    values: np.ndarray
    windows: tuple[int, ...]

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.values).any(axis=-1)

    @property
    def width(self) -> int:
        return self.values.shape[-1]


def trailing_mean(x: np.ndarray, w: int) -> np.ndarray:
    """Mean of ``x[t], x[t-1], ..., x[t-w+1]`` along axis 1, summed in that order.

    The first ``w - 1`` positions are NaN, as is any window touching a NaN.
    """
    out = np.full(x.shape, np.nan)
    n = x.shape[1]
    if w > n:
        return out
    acc = np.zeros_like(x[:, w - 1 :])
    for j in range(w):
        acc = acc + x[:, w - 1 - j : n - j]
    out[:, w - 1 :] = acc / w
    return out


def temporal_variants(
    features: FeatureSeries, windows: Sequence[int] = DEFAULT_WINDOWS
) -> VariantSeries:
    windows = tuple(int(w) for w in windows)
    if not windows or any(w < 1 for w in windows):
        raise ValueError(f"windows must be positive integers, got {windows}")
    blocks = [trailing_mean(features.values, w) for w in windows]
    values = np.concatenate(blocks, axis=-1)
    out = VariantSeries(list(features.tickers), features.dates, values, windows)
    if not out.valid.any():
        warnings.warn(
            f"window {max(windows)} exceeds available history for every date; no samples",
            RuntimeWarning,
            stacklevel=2,
        )
    return out


@dataclass
class SampleSet:
    """Flat collection of stock-day samples."""

    tickers: np.ndarray  # object array of str
    dates: np.ndarray  # datetime64[ns]
    X: np.ndarray  # (n, d_mk)
    sectors: np.ndarray  # object array of str

    def __len__(self) -> int:
        return len(self.tickers)

    def select(self, mask: np.ndarray) -> "SampleSet":
        return SampleSet(self.tickers[mask], self.dates[mask], self.X[mask], self.sectors[mask])

    def between(self, start, end) -> "SampleSet":
        start, end = np.datetime64(pd.Timestamp(start)), np.datetime64(pd.Timestamp(end))
        return self.select((self.dates >= start) & (self.dates <= end))

    def for_ticker(self, ticker: str) -> "SampleSet":
        return self.select(self.tickers == ticker)

    @property
    def unique_tickers(self) -> list[str]:
        return sorted(set(self.tickers.tolist()))

    @classmethod
    def concat(cls, parts: Sequence["SampleSet"]) -> "SampleSet":
        return cls(
            np.concatenate([p.tickers for p in parts]),
            np.concatenate([p.dates for p in parts]),
            np.concatenate([p.X for p in parts]),
            np.concatenate([p.sectors for p in parts]),
        )


def to_samples(variants: VariantSeries, sectors: dict[str, str]) -> SampleSet:
    """All eligible (ticker, date) samples in ticker-major, date-minor order."""
    ti, di = np.nonzero(variants.valid)
    tickers = np.asarray(variants.tickers, dtype=object)[ti]
    return SampleSet(
        tickers=tickers,
        dates=variants.dates.values[di],
        X=variants.values[ti, di],
        sectors=np.asarray([sectors[t] for t in tickers], dtype=object),
    )


@dataclass
class Domain:
    start: pd.Timestamp
    end: pd.Timestamp
    samples: SampleSet

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class DomainSequence:
    domains: list[Domain] = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.domains)

    def __len__(self) -> int:
        return len(self.domains)

    def __getitem__(self, i):
        return self.domains[i]

    def __iter__(self):
        return iter(self.domains)


def quarterly_schedule(start, end) -> list[tuple[pd.Timestamp, pd.Timestamp]]:
    """Calendar quarters overlapping ``[start, end]``, clipped to that range."""
    start, end = pd.Timestamp(start), pd.Timestamp(end)
    out = []
    for q in pd.period_range(start, end, freq="Q"):
        lo = max(q.start_time.normalize(), start)
        hi = min(q.end_time.normalize(), end)
        out.append((lo, hi))
    return out


def build_domains(
    variants: VariantSeries,
    sectors: dict[str, str],
    schedule: Sequence[tuple],
    on_empty: str = "error",
) -> DomainSequence:
    """Partition eligible samples into the scheduled (inclusive) date ranges."""
    if on_empty not in ("error", "skip"):
        raise ValueError("on_empty must be 'error' or 'skip'")
    ranges = [(pd.Timestamp(a), pd.Timestamp(b)) for a, b in schedule]
    for (a, b) in ranges:
        if b < a:
            raise ValueError(f"range end {b.date()} precedes start {a.date()}")
    for (_, b0), (a1, _) in zip(ranges, ranges[1:]):
        if a1 <= b0:
            raise ValueError("schedule ranges must be disjoint and increasing")
    if ranges and (ranges[0][0] > variants.dates[-1] or ranges[-1][1] < variants.dates[0]):
        raise ValueError("schedule lies outside the panel calendar")

    samples = to_samples(variants, sectors)
    seq = DomainSequence()
    for a, b in ranges:
        part = samples.between(a, b)
        if len(part) == 0:
            msg = f"empty domain {a.date()}..{b.date()}"
            if on_empty == "error":
                raise EmptyDomainError(msg)
            logger.warning("%s; skipped", msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            continue
        seq.domains.append(Domain(a, b, part))
    return seq
