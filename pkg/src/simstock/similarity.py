"""Per-stock embeddings, TOP@k neighbour queries and embedding-derived
similarity matrices."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
import pandas as pd

from .data import SampleSet
from .model import ModelParams, embed_array

logger = logging.getLogger(__name__)

METHODS = ("L2", "L1", "CORR", "CKA")


@dataclass
class EmbeddingSet:
    tickers: list[str]
    vectors: np.ndarray
    period: str = ""
    model_id: str = ""
    exchange: str = ""
    daily: dict[str, pd.DataFrame] = field(default_factory=dict, repr=False)
    omitted: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=float)
        if len(set(self.tickers)) != len(self.tickers):
            raise ValueError("tickers must be unique")
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.tickers):
            raise ValueError("vectors must be (n_tickers, d)")

    def __len__(self) -> int:
        return len(self.tickers)

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def vector(self, ticker: str) -> np.ndarray:
        try:
            return self.vectors[self.tickers.index(ticker)]
        except ValueError:
            raise KeyError(f"unknown ticker {ticker!r}") from None

    def rename(self, mapping: dict[str, str]) -> "EmbeddingSet":
        return EmbeddingSet(
            [mapping.get(t, t) for t in self.tickers],
            self.vectors.copy(),
            self.period,
            self.model_id,
            self.exchange,
            {mapping.get(t, t): v for t, v in self.daily.items()},
        )

    def subset(self, tickers: Iterable[str]) -> "EmbeddingSet":
        tickers = list(tickers)
        idx = [self.tickers.index(t) for t in tickers]
        return EmbeddingSet(tickers, self.vectors[idx], self.period, self.model_id,
                            self.exchange, {t: self.daily[t] for t in tickers if t in self.daily})

    def to_frame(self) -> pd.DataFrame:
        cols = [f"v{i + 1}" for i in range(self.d)]
        frame = pd.DataFrame(self.vectors, columns=cols)
        frame.insert(0, "ticker", self.tickers)
        return frame


def embed_universe(
    samples: SampleSet,
    params: ModelParams,
    start=None,
    end=None,
    universe: Optional[Iterable[str]] = None,
    period: str = "",
    model_id: str = "",
    exchange: str = "",
) -> EmbeddingSet:
    """Mean of daily [ST] outputs per ticker over ``[start, end]``.

    Tickers listed in ``universe`` without eligible days are omitted and
    recorded in ``EmbeddingSet.omitted``.
    """
    if start is not None or end is not None:
        lo = start if start is not None else samples.dates.min()
        hi = end if end is not None else samples.dates.max()
        samples = samples.between(lo, hi)
    present = samples.unique_tickers
    omitted = sorted(set(universe or []) - set(present))
    if omitted:
        logger.warning("no eligible days for %s", omitted)
    if not present:
        raise ValueError("empty universe: no eligible samples in window")
    Z = embed_array(samples.X, samples.sectors, params)
    vectors, daily = [], {}
    for t in present:
        rows = samples.tickers == t
        vectors.append(Z[rows].mean(axis=0))
        daily[t] = pd.DataFrame(Z[rows], index=pd.DatetimeIndex(samples.dates[rows]))
    return EmbeddingSet(present, np.vstack(vectors), period, model_id, exchange, daily, omitted)


def _distances(query: np.ndarray, vectors: np.ndarray, metric: str) -> np.ndarray:
    if metric == "L2":
        return np.sqrt(((vectors - query) ** 2).sum(axis=1))
    if metric == "L1":
        return np.abs(vectors - query).sum(axis=1)
    if metric == "cosine":
        denom = np.linalg.norm(vectors, axis=1) * np.linalg.norm(query)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = (vectors @ query) / denom
        return 1.0 - np.nan_to_num(cos, nan=0.0)
    raise ValueError(f"unknown metric {metric!r}")


def topk(
    query: np.ndarray,
    emb: EmbeddingSet,
    k: int,
    metric: str = "L2",
    query_ticker: Optional[str] = None,
) -> list[tuple[str, float]]:
    """The ``k`` nearest tickers by ascending distance, ties broken by ticker.

    ``query_ticker`` is excluded from the candidates when present.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    query = np.asarray(query, dtype=float)
    if query.shape != (emb.d,):
        raise ValueError(f"query has shape {query.shape}, expected ({emb.d},)")
    keep = [i for i, t in enumerate(emb.tickers) if t != query_ticker]
    tickers = np.asarray(emb.tickers, dtype=object)[keep]
    dist = _distances(query, emb.vectors[keep], metric)
    order = np.lexsort((tickers, dist))
    if k > len(order):
        warnings.warn(f"k={k} exceeds {len(order)} candidates; returning all", RuntimeWarning,
                      stacklevel=2)
    return [(str(tickers[i]), float(dist[i])) for i in order[:k]]


def cross_exchange_topk(
    query_samples: SampleSet,
    params: ModelParams,
    target: EmbeddingSet,
    k: int,
    metric: str = "L2",
    model_id: Optional[str] = None,
    query_ticker: Optional[str] = None,
) -> list[tuple[str, float]]:
    """Embed a query's samples with the source-exchange parameters and rank ``target``."""
    if model_id is not None and target.model_id and model_id != target.model_id:
        raise ValueError(f"target embeddings come from model {target.model_id!r}, not {model_id!r}")
    if params.config.d != target.d:
        raise ValueError("embedding dimension mismatch between model and target set")
    if len(query_samples) == 0:
        raise ValueError("query has no eligible samples")
    z = embed_array(query_samples.X, query_samples.sectors, params).mean(axis=0)
    return topk(z, target, k, metric, query_ticker=query_ticker)


@dataclass
class SimilarityMatrix:
    tickers: list[str]
    values: np.ndarray
    method: str
    degenerate: bool = False

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, index=self.tickers, columns=self.tickers)


def linear_cka(X: np.ndarray, Y: np.ndarray) -> float:
    """Linear-kernel CKA between two (n_samples, features) matrices."""
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    num = np.linalg.norm(Y.T @ X, "fro") ** 2
    den = np.linalg.norm(X.T @ X, "fro") * np.linalg.norm(Y.T @ Y, "fro")
    return float(num / den) if den > 0 else 0.0


def maxmin_similarity(D: np.ndarray) -> tuple[np.ndarray, bool]:
    """Affine map of off-diagonal distances onto [-1, 1], smallest -> +1; unit diagonal."""
    n = len(D)
    off = ~np.eye(n, dtype=bool)
    lo, hi = D[off].min(), D[off].max()
    if hi == lo:
        out = np.ones_like(D)
        return out, True
    out = 1.0 - 2.0 * (D - lo) / (hi - lo)
    np.fill_diagonal(out, 1.0)
    return out, False


def similarity_matrix(emb: EmbeddingSet, method: str = "L2") -> SimilarityMatrix:
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    n = len(emb)
    if n < 2:
        raise ValueError("need at least two tickers")
    V = emb.vectors
    degenerate = False
    if method in ("L2", "L1"):
        diff = V[:, None, :] - V[None, :, :]
        D = np.sqrt((diff**2).sum(-1)) if method == "L2" else np.abs(diff).sum(-1)
        # agree exactly on both triangles
        D = np.triu(D, 1) + np.triu(D, 1).T
        S, degenerate = maxmin_similarity(D)
        if degenerate:
            warnings.warn("all pairwise distances equal; similarity set to 1", RuntimeWarning,
                          stacklevel=2)
    elif method == "CORR":
        if emb.d < 2:
            raise ValueError("CORR needs d >= 2")
        S = np.clip(np.corrcoef(V), -1.0, 1.0)
    else:
        if emb.d < 2:
            raise ValueError("CKA needs d >= 2")
        missing = [t for t in emb.tickers if t not in emb.daily]
        if missing:
            raise ValueError(f"CKA needs daily embeddings; missing for {missing}")
        S = np.eye(n)
        for i in range(n):
            for j in range(i + 1, n):
                a, b = emb.daily[emb.tickers[i]], emb.daily[emb.tickers[j]]
                common = a.index.intersection(b.index)
                if len(common) < 2:
                    raise ValueError(f"fewer than 2 common days for {emb.tickers[i]}, {emb.tickers[j]}")
                S[i, j] = S[j, i] = linear_cka(a.loc[common].to_numpy(), b.loc[common].to_numpy())
    S = (S + S.T) / 2.0
    np.fill_diagonal(S, 1.0)
    return SimilarityMatrix(list(emb.tickers), S, method, degenerate)
