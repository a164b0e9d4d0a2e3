"""Similarity-quality metrics: Pearson correlation, Sakoe-Chiba banded DTW,
the TOP@k report and the mixing-weight ablation harness."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

K_LIST = (1, 3, 5, 7, 9)
LAMBDA_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("pearson needs two equal-length series of length >= 2")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(xc @ xc), math.sqrt(yc @ yc)
    if sx == 0 or sy == 0:
        raise ValueError("zero variance series")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def default_band(m: int, n: int) -> int:
    return max(math.ceil(0.1 * max(m, n)), abs(m - n))


@dataclass
class AlignmentPath:
    pairs: list[tuple[int, int]]  # 1-based (i, j)
    m: int
    n: int
    r: int

    def __len__(self) -> int:
        return len(self.pairs)


def _dtw_table(x: Sequence[float], y: Sequence[float], r: int) -> list[list[float]]:
    m, n = len(x), len(y)
    inf = math.inf
    D = [[inf] * (n + 1) for _ in range(m + 1)]
    D[0][0] = 0.0
    for i in range(1, m + 1):
        xi = x[i - 1]
        prev, row = D[i - 1], D[i]
        for j in range(max(1, i - r), min(n, i + r) + 1):
            diff = xi - y[j - 1]
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if row[j - 1] < best:
                best = row[j - 1]
            row[j] = diff * diff + best
    return D


def _check(x, y, r):
    x = [float(v) for v in np.asarray(x, dtype=float).ravel()]
    y = [float(v) for v in np.asarray(y, dtype=float).ravel()]
    if not x or not y:
        raise ValueError("dtw needs non-empty series")
    if r is None:
        r = default_band(len(x), len(y))
    if r < abs(len(x) - len(y)):
        raise ValueError(f"band radius {r} < |m - n| = {abs(len(x) - len(y))}: no feasible path")
    return x, y, int(r)


def dtw(x, y, r: Optional[int] = None) -> float:
    """Square root of the minimal banded sum of squared differences."""
    x, y, r = _check(x, y, r)
    return math.sqrt(_dtw_table(x, y, r)[len(x)][len(y)])


def dtw_path(x, y, r: Optional[int] = None) -> tuple[float, AlignmentPath]:
    x, y, r = _check(x, y, r)
    D = _dtw_table(x, y, r)
    i, j = len(x), len(y)
    pairs = [(i, j)]
    while (i, j) != (1, 1):
        moves = [(D[i - 1][j - 1], i - 1, j - 1), (D[i - 1][j], i - 1, j), (D[i][j - 1], i, j - 1)]
        _, i, j = min((m for m in moves if m[1] >= 1 and m[2] >= 1), key=lambda m: m[0])
        pairs.append((i, j))
    pairs.reverse()
    return math.sqrt(D[len(x)][len(y)]), AlignmentPath(pairs, len(x), len(y), r)


def cumulative(returns) -> np.ndarray:
    return np.cumprod(1.0 + np.asarray(returns, dtype=float)) - 1.0


def topk_report(
    rankings: Mapping[str, Sequence[str]],
    returns: pd.DataFrame,
    k_list: Sequence[int] = K_LIST,
    band: Optional[int] = None,
) -> pd.DataFrame:
    """Mean correlation of daily returns and DTW of cumulative paths over the
    top-k neighbours, averaged across queries.

    ``returns`` is a dates x tickers frame of test-period simple returns.
    Queries whose own series or any needed neighbour series is missing/NaN are
    dropped and listed in ``result.attrs["dropped"]``.
    """
    k_list = sorted(set(int(k) for k in k_list))
    kmax = max(k_list)
    complete = set(returns.columns[returns.notna().all().to_numpy()])
    per_query, dropped = {}, []
    for q in sorted(rankings):
        ranked = list(rankings[q])[:kmax]
        if q not in complete or any(t not in complete for t in ranked) or not ranked:
            dropped.append(q)
            continue
        rq = returns[q].to_numpy()
        cq = cumulative(rq)
        corr = [pearson(rq, returns[t].to_numpy()) for t in ranked]
        dist = [dtw(cq, cumulative(returns[t].to_numpy()), band) for t in ranked]
        per_query[q] = {k: (np.mean(corr[:k]), np.mean(dist[:k])) for k in k_list}
    if dropped:
        logger.warning("dropped queries without complete test series: %s", dropped)
    rows = []
    for k in k_list:
        vals = [per_query[q][k] for q in sorted(per_query)]
        if vals:
            c = float(np.mean([v[0] for v in vals]))
            d = float(np.mean([v[1] for v in vals]))
        else:
            c = d = float("nan")
        rows.append({"k": k, "correlation": c, "dtw": d})
    table = pd.DataFrame(rows).set_index("k")
    table.attrs["dropped"] = dropped
    table.attrs["n_queries"] = len(per_query)
    return table


@dataclass
class AblationResult:
    correlation: pd.DataFrame  # rows lambda, columns TOP@k
    dtw: pd.DataFrame
    failures: dict[float, str] = field(default_factory=dict)

    def best(self) -> dict[str, pd.Series]:
        """Best lambda per column: highest correlation, lowest DTW."""
        return {"correlation": self.correlation.idxmax(), "dtw": self.dtw.idxmin()}

    def flagged(self, metric: str) -> pd.DataFrame:
        """Formatted table with the per-column best marked by ``*``."""
        table = getattr(self, metric)
        best = self.best()[metric]
        out = table.map(lambda v: f"{v:.4f}")
        for col, lam in best.items():
            if pd.notna(lam):
                out.loc[lam, col] = out.loc[lam, col] + "*"
        return out

    def long_frame(self) -> pd.DataFrame:
        rows = []
        best = self.best()
        for metric in ("correlation", "dtw"):
            table = getattr(self, metric)
            for lam in table.index:
                for col in table.columns:
                    rows.append({"lambda": lam, "k": int(col.split("@")[1]), "metric": metric,
                                 "value": table.loc[lam, col], "best": best[metric][col] == lam})
        return pd.DataFrame(rows)


def lambda_ablation(
    run: Callable[[float], pd.DataFrame],
    lambdas: Sequence[float] = LAMBDA_GRID,
    k_list: Sequence[int] = K_LIST,
    keep_going: bool = False,
) -> AblationResult:
    """Tabulate ``run(lam)`` (a :func:`topk_report` table) for every mixing weight.

    Failures propagate unless ``keep_going``; then the row is NaN and the
    message recorded.
    """
    cols = [f"TOP@{k}" for k in sorted(k_list)]
    corr = pd.DataFrame(np.nan, index=pd.Index(list(lambdas), name="lambda"), columns=cols)
    dist = corr.copy()
    failures = {}
    for lam in lambdas:
        try:
            table = run(lam)
        except Exception as exc:  # noqa: BLE001 - per-cell isolation is the point
            if not keep_going:
                raise
            failures[lam] = f"{type(exc).__name__}: {exc}"
            logger.error("lambda=%s failed: %s", lam, exc)
            continue
        for k in sorted(k_list):
            corr.loc[lam, f"TOP@{k}"] = table.loc[k, "correlation"]
            dist.loc[lam, f"TOP@{k}"] = table.loc[k, "dtw"]
    return AblationResult(corr, dist, failures)


def pipeline_runner(domains, reference, test_returns, tdg_config, queries=None,
                    k_list=K_LIST, metric: str = "L2", band=None):
    """Build the ``run(lam)`` callable used by :func:`lambda_ablation`:
    train on ``domains``, generate next-domain parameters, embed the reference
    samples and score neighbours on the test returns."""
    from .model import ModelParams
    from .similarity import embed_universe, topk
    from .tdg import infer_next, train_sequence

    def run(lam: float) -> pd.DataFrame:
        cfg = dataclasses.replace(tdg_config, model=dataclasses.replace(tdg_config.model, lam=lam))
        gen, trace = train_sequence(domains, cfg)
        theta = ModelParams.unflatten(cfg.model, infer_next(trace, gen))
        emb = embed_universe(reference, theta)
        # neighbours are drawn only from tickers with a full test series
        complete = set(test_returns.columns[test_returns.notna().all().to_numpy()])
        pool = emb.subset([t for t in emb.tickers if t in complete])
        qs = queries or pool.tickers
        ranks = {q: [t for t, _ in topk(emb.vector(q), pool, max(k_list), metric, query_ticker=q)]
                 for q in qs if q in emb.tickers}
        return topk_report(ranks, test_returns, k_list, band)

    return run
