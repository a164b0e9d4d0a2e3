"""Covariance estimators, target-risk mean-variance and minimum-variance
solvers, the rolling monthly backtest and its performance metrics."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import cvxpy as cp
import numpy as np
import pandas as pd
from scipy import stats

from .similarity import SimilarityMatrix

logger = logging.getLogger(__name__)

COV_METHODS = ("HC", "SM", "GS", "SS-L2", "SS-L1", "SS-CORR", "SS-CKA")
RISK_TARGETS = (0.24, 0.27, 0.30, 0.33)
PSD_TOL = 1e-8
PERF_LABELS = (
    "Arithmetic Return (%)",
    "Geometric Return (%)",
    "Cumulative Return (%)",
    "Annualized SD (%)",
    "Annualized Skewness",
    "Annualized Kurtosis",
    "Maximum Drawdown (%)",
    "Monthly 95% VaR (%)",
    "Sharpe Ratio",
    "Annualized Turnover",
)


@dataclass
class CovEstimate:
    matrix: np.ndarray
    method: str
    repaired: bool = False
    flags: list[str] = field(default_factory=list)
    corr: Optional[np.ndarray] = None
    shrinkage: Optional[float] = None
    units: str = "per-period"

    @property
    def n(self) -> int:
        return len(self.matrix)

    def to_frame(self, tickers=None) -> pd.DataFrame:
        return pd.DataFrame(self.matrix, index=tickers, columns=tickers)


def _returns(returns, min_rows: int = 2) -> np.ndarray:
    R = np.asarray(returns, dtype=float)
    if R.ndim == 1:
        R = R[:, None]
    if R.ndim != 2 or len(R) < min_rows:
        raise ValueError(f"need a T x N return matrix with T >= {min_rows}")
    if not np.isfinite(R).all():
        raise ValueError("returns contain NaN or inf")
    return R


def _corr_from_cov(S: np.ndarray) -> np.ndarray:
    sd = np.sqrt(np.diag(S))
    with np.errstate(invalid="ignore", divide="ignore"):
        C = S / np.outer(sd, sd)
    return C


def historical_cov(returns) -> CovEstimate:
    """Sample covariance with 1/(T-1) normalization."""
    R = _returns(returns)
    S = np.atleast_2d(np.cov(R, rowvar=False, ddof=1))
    flags = []
    zero = np.flatnonzero(np.diag(S) <= 0)
    if len(zero):
        flags.append(f"zero variance in columns {zero.tolist()}")
        logger.warning(flags[-1])
    return CovEstimate(S, "HC", flags=flags)


def shrinkage_cov(returns) -> CovEstimate:
    """Shrink the sample covariance towards the constant-correlation target.

    The intensity is the analytic optimum ``kappa / T`` with
    ``kappa = (pi - rho) / gamma``, clamped into [0, 1].
    """
    R = _returns(returns)
    T, N = R.shape
    if N < 2:
        raise ValueError("shrinkage needs at least two assets")
    X = R - R.mean(axis=0)
    S = X.T @ X / (T - 1)
    var = np.diag(S)
    if np.any(var <= 0):
        raise ValueError("degenerate (zero) variance; shrinkage target undefined")
    sd = np.sqrt(var)
    C = S / np.outer(sd, sd)
    r_bar = (C.sum() - N) / (N * (N - 1))
    F = r_bar * np.outer(sd, sd)
    np.fill_diagonal(F, var)

    # moments use 1/T as in the asymptotic derivation
    S_t = X.T @ X / T
    X2 = X**2
    pi_mat = X2.T @ X2 / T - S_t**2
    pi_hat = pi_mat.sum()
    var_t = np.diag(S_t)
    sd_t = np.sqrt(var_t)
    theta_ii = (X**3).T @ X / T - var_t[:, None] * S_t
    ratio = sd_t[None, :] / sd_t[:, None]
    off = ~np.eye(N, dtype=bool)
    rho_hat = np.trace(pi_mat) + r_bar / 2.0 * np.sum(
        (ratio * theta_ii + ratio.T * theta_ii.T)[off]
    )
    F_t = r_bar * np.outer(sd_t, sd_t)
    np.fill_diagonal(F_t, var_t)
    gamma = np.linalg.norm(S_t - F_t, "fro") ** 2
    if gamma <= 0:
        delta = 0.0
    else:
        delta = float(np.clip((pi_hat - rho_hat) / gamma / T, 0.0, 1.0))
    sigma = delta * F + (1.0 - delta) * S
    return CovEstimate(sigma, "SM", corr=_corr_from_cov(sigma), shrinkage=delta)


def gerber_matrix(returns, c: float = 0.5) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Gerber statistic matrix and the list of all-neutral pairs (set to 0)."""
    if not 0 < c:
        raise ValueError("threshold fraction must be positive")
    R = _returns(returns)
    sd = R.std(axis=0, ddof=1)
    U = (R >= c * sd).astype(float)
    D = (R <= -c * sd).astype(float)
    B = np.clip(U + D, 0.0, 1.0)
    n_conc = U.T @ U + D.T @ D
    n_disc = U.T @ D + D.T @ U
    n_mixed = B.T @ (1.0 - B) + (1.0 - B).T @ B
    denom = n_conc + n_disc + n_mixed
    with np.errstate(invalid="ignore", divide="ignore"):
        G = (n_conc - n_disc) / denom
    neutral = [(i, j) for i, j in zip(*np.nonzero(denom == 0)) if i < j]
    G[denom == 0] = 0.0
    np.fill_diagonal(G, 1.0)
    return G, neutral


def gerber_cov(returns, c: float = 0.5) -> CovEstimate:
    """Gerber correlation (threshold ``c`` times each asset's sd) scaled by sample vols."""
    R = _returns(returns)
    G, neutral = gerber_matrix(R, c)
    flags = []
    if neutral:
        flags.append(f"all-neutral pairs set to 0: {neutral}")
        logger.warning(flags[-1])
    sd = R.std(axis=0, ddof=1)
    S = G * np.outer(sd, sd)
    est = _finish(S, "GS", flags)
    est.corr = G
    return est


def nearest_psd(M) -> tuple[np.ndarray, list[str]]:
    """Clip negative eigenvalues, then rescale back onto the original diagonal.

    PSD input is returned unchanged. Rows whose clipped diagonal vanishes
    cannot be rescaled; they are left as clipped and reported.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("need a square matrix")
    A = (M + M.T) / 2.0
    vals, vecs = np.linalg.eigh(A)
    if vals.min() >= 0:
        return M.copy(), []
    X = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
    X = (X + X.T) / 2.0
    flags = []
    target, current = np.diag(A), np.diag(X)
    scale = np.ones(len(A))
    ok = current > 0
    if not ok.all():
        flags.append(f"degenerate diagonal after clipping at {np.flatnonzero(~ok).tolist()}")
    scale[ok] = np.sqrt(np.clip(target[ok], 0.0, None) / current[ok])
    out = X * np.outer(scale, scale)
    return (out + out.T) / 2.0, flags


def _finish(S: np.ndarray, method: str, flags: list[str]) -> CovEstimate:
    S = (S + S.T) / 2.0
    repaired = False
    if np.linalg.eigvalsh(S).min() < -PSD_TOL:
        S, extra = nearest_psd(S)
        flags = flags + extra
        repaired = True
    return CovEstimate(S, method, repaired, flags)


def embedding_cov(sim: Union[SimilarityMatrix, np.ndarray], vols) -> CovEstimate:
    """``Sigma_ij = sim_ij * vol_i * vol_j`` with PSD repair when needed."""
    if isinstance(sim, SimilarityMatrix):
        S, method = sim.values, f"SS-{sim.method}"
    else:
        S, method = np.asarray(sim, dtype=float), "SS"
    vols = np.asarray(vols, dtype=float)
    if S.shape != (len(vols), len(vols)):
        raise ValueError(f"similarity {S.shape} does not match {len(vols)} volatilities")
    if np.any(vols <= 0):
        raise ValueError("volatilities must be positive")
    est = _finish(S * np.outer(vols, vols), method, [])
    est.corr = S
    return est


@dataclass
class MvoProblem:
    mu: np.ndarray
    sigma: np.ndarray
    sigma_target: float
    psi: float = 0.001
    w0: Optional[np.ndarray] = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma.matrix if isinstance(self.sigma, CovEstimate) else self.sigma,
                                dtype=float)
        n = len(self.mu)
        self.w0 = np.zeros(n) if self.w0 is None else np.asarray(self.w0, dtype=float)
        if self.sigma.shape != (n, n) or self.w0.shape != (n,):
            raise ValueError("dimension mismatch between mu, Sigma and w0")
        if not self.sigma_target > 0:
            raise ValueError("target volatility must be positive")
        if self.psi < 0:
            raise ValueError("transaction cost must be non-negative")


@dataclass
class MvoResult:
    weights: np.ndarray
    objective: float
    volatility: float
    infeasible: bool = False
    status: str = "optimal"


def _factor(sigma: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((sigma + sigma.T) / 2.0)
    if vals.min() < -PSD_TOL * max(1.0, abs(vals).max()):
        raise ValueError("covariance is not PSD; repair it first")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _solve(prob: cp.Problem, strict: bool = False) -> None:
    """Solve with Clarabel, falling back to SCS. ``strict`` rejects inaccurate optima."""
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="Solution may be inaccurate")
        try:
            prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-9, tol_gap_rel=1e-9, tol_feas=1e-9)
        except cp.SolverError:
            prob.solve(solver=cp.SCS, eps=1e-9, max_iters=200_000)
    ok = (cp.OPTIMAL,) if strict else (cp.OPTIMAL, cp.OPTIMAL_INACCURATE)
    if prob.status not in ok:
        raise RuntimeError(f"solver failed: {prob.status}")


def _simplex(w) -> np.ndarray:
    w = np.clip(np.asarray(w, dtype=float), 0.0, 1.0)
    return w / w.sum()


def solve_min_variance(sigma) -> np.ndarray:
    """Long-only, fully invested minimum-variance weights."""
    sigma = np.asarray(sigma.matrix if isinstance(sigma, CovEstimate) else sigma, dtype=float)
    n = len(sigma)
    if n == 1:
        return np.ones(1)
    L = _factor(sigma)
    w = cp.Variable(n)
    prob = cp.Problem(cp.Minimize(cp.sum_squares(L.T @ w)), [cp.sum(w) == 1, w >= 0, w <= 1])
    _solve(prob)
    return _simplex(w.value)


def mvo_objective(p: MvoProblem, w) -> float:
    return float(p.mu @ w - p.psi * np.abs(w - p.w0).sum())


def solve_mvo(p: MvoProblem) -> MvoResult:
    """Maximize ``mu'w - psi |w - w0|_1`` s.t. ``w'Sigma w <= sigma_target^2``, budget and box.

    Among optimal portfolios the one with the least variance is returned.
    If even the minimum-variance portfolio breaks the cap, that portfolio is
    returned with ``infeasible=True``.
    """
    n = len(p.mu)
    L = _factor(p.sigma)
    w_mv = solve_min_variance(p.sigma)
    vol_mv = float(np.linalg.norm(L.T @ w_mv))
    if vol_mv > p.sigma_target * (1 + 1e-9):
        logger.warning("risk cap %.6g below minimum attainable volatility %.6g", p.sigma_target, vol_mv)
        return MvoResult(w_mv, mvo_objective(p, w_mv), vol_mv, True, "infeasible-cap")
    if n == 1:
        return MvoResult(np.ones(1), mvo_objective(p, np.ones(1)), vol_mv)
    w = cp.Variable(n)
    cons = [cp.norm(L.T @ w, 2) <= p.sigma_target, cp.sum(w) == 1, w >= 0, w <= 1]
    obj = p.mu @ w - p.psi * cp.norm1(w - p.w0)
    _solve(cp.Problem(cp.Maximize(obj), cons))
    best = mvo_objective(p, w.value)
    # tie-break on the optimal face: least variance
    tol = 1e-9 * (1.0 + abs(best))
    second = cp.Problem(cp.Minimize(cp.sum_squares(L.T @ w)), cons + [obj >= best - tol])
    first_w = w.value.copy()
    try:
        _solve(second, strict=True)
        wv = w.value
    except RuntimeError:
        wv = first_w
    wv = _simplex(wv)
    vol = float(np.linalg.norm(L.T @ wv))
    return MvoResult(wv, mvo_objective(p, wv), vol)


@dataclass
class BacktestResult:
    weights: pd.DataFrame
    returns: pd.DataFrame  # gross, cost, net
    report: pd.Series
    flags: list[str] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        w = self.weights.add_prefix("w_")
        return pd.concat([w, self.returns], axis=1)


CovFn = Callable[[pd.DataFrame, pd.Timestamp], CovEstimate]


def cov_by_name(name: str) -> Callable[[pd.DataFrame, pd.Timestamp], CovEstimate]:
    table = {"HC": historical_cov, "SM": shrinkage_cov, "GS": gerber_cov}
    if name not in table:
        raise ValueError(f"unknown covariance method {name!r}; use {sorted(table)} or a callable")
    fn = table[name]
    return lambda window, date: fn(window.to_numpy())


def rolling_backtest(
    returns: pd.DataFrame,
    cov: Union[str, CovFn] = "HC",
    objective: str = "mvo",
    sigma_target: float = 0.24,
    psi: float = 0.001,
    lookback: int = 12,
    start: Optional[int] = None,
    risk_free: float = 0.0,
) -> BacktestResult:
    """Monthly rebalanced backtest on a dates x assets frame of monthly returns.

    ``sigma_target`` is annual and is converted to a monthly cap. Month ``t``
    uses the trailing ``lookback`` months for mu and Sigma, pays
    ``psi * |w_t - w_{t-1}|_1`` and earns ``w_t' r_t``. Assets with gaps in
    the window or the holding month are excluded for that month.
    """
    if objective not in ("mvo", "mvp"):
        raise ValueError("objective must be 'mvo' or 'mvp'")
    cov_fn = cov_by_name(cov) if isinstance(cov, str) else cov
    assets = list(returns.columns)
    start = lookback if start is None else start
    if start < lookback or start >= len(returns):
        raise ValueError("panel does not cover the lookback plus at least one month")
    prev = pd.Series(0.0, index=assets)
    w_rows, r_rows, flags = [], [], []
    cap = sigma_target / math.sqrt(12.0)
    for t in range(start, len(returns)):
        date = returns.index[t]
        window = returns.iloc[t - lookback : t]
        ok = window.notna().all() & returns.iloc[t].notna()
        keep = [a for a in assets if ok[a]]
        if len(keep) < len(assets):
            msg = f"{date}: dropped {[a for a in assets if not ok[a]]}"
            flags.append(msg)
            logger.info(msg)
        if not keep:
            raise ValueError(f"{date}: no asset with complete data")
        win = window[keep]
        est = cov_fn(win, date)
        w0 = prev[keep].to_numpy()
        if objective == "mvp":
            w = solve_min_variance(est.matrix)
        else:
            res = solve_mvo(MvoProblem(win.mean().to_numpy(), est.matrix, cap, psi, w0))
            if res.infeasible:
                flags.append(f"{date}: risk cap infeasible, minimum-variance used")
            w = res.weights
        new = pd.Series(0.0, index=assets)
        new[keep] = w
        cost = psi * float(np.abs(new - prev).sum())
        gross = float(new[keep] @ returns.iloc[t][keep])
        w_rows.append(new.rename(date))
        r_rows.append({"date": date, "gross": gross, "cost": cost, "net": gross - cost})
        prev = new
    weights = pd.DataFrame(w_rows)
    weights.index.name = "date"
    rets = pd.DataFrame(r_rows).set_index("date")
    report = perf_metrics(rets["net"], weights, risk_free)
    return BacktestResult(weights, rets, report, flags)


def perf_metrics(returns, weights: Optional[pd.DataFrame] = None, risk_free: float = 0.0) -> pd.Series:
    """Annualized performance table of a monthly return series.

    Skewness and (non-excess) kurtosis are moments of the monthly returns.
    Turnover counts rebalancing trades after the initial allocation.
    """
    r = np.asarray(returns, dtype=float)
    n = len(r)
    if n < 2:
        raise ValueError("need at least two periods")
    growth = np.cumprod(1.0 + r)
    peak = np.maximum.accumulate(np.concatenate([[1.0], growth]))[1:]
    sd = r.std(ddof=1) * math.sqrt(12.0)
    arith = r.mean() * 12.0
    if np.ptp(r) == 0:
        skew = kurt = float("nan")
        logger.warning("constant return series: skewness and kurtosis undefined")
    else:
        skew = float(stats.skew(r))
        kurt = float(stats.kurtosis(r, fisher=False))
    if weights is not None and len(weights) > 1:
        turnover = float(np.abs(np.diff(np.asarray(weights, dtype=float), axis=0)).sum()) * 12.0 / n
    else:
        turnover = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sharpe = (arith - risk_free) / sd if sd > 0 else float("nan")
    values = [
        arith * 100.0,
        (growth[-1] ** (12.0 / n) - 1.0) * 100.0,
        (growth[-1] - 1.0) * 100.0,
        sd * 100.0,
        skew,
        kurt,
        float(min(0.0, np.min(growth / peak - 1.0))) * 100.0,
        float(np.percentile(r, 5)) * 100.0,
        sharpe,
        turnover,
    ]
    return pd.Series(values, index=list(PERF_LABELS), name="value")


@dataclass
class FrobeniusResult:
    ratio: float
    numerator: float
    denominator: float
    flagged: bool = False


def frobenius_tracking(MD, RC_past, RC_future) -> FrobeniusResult:
    """``||MD - RC_future||_F / ||MD - RC_past||_F``; NaN and flagged when MD equals RC_past."""
    MD, RP, RF = (np.asarray(m, dtype=float) for m in (MD, RC_past, RC_future))
    if not MD.shape == RP.shape == RF.shape or MD.ndim != 2:
        raise ValueError("matrices must share one square shape")
    num = float(np.linalg.norm(MD - RF, "fro"))
    den = float(np.linalg.norm(MD - RP, "fro"))
    if den == 0:
        logger.warning("method matrix equals the past realized correlation; ratio undefined")
        return FrobeniusResult(float("nan"), num, den, True)
    return FrobeniusResult(num / den, num, den)


def subuniverse_draws(assets: Sequence[str], sizes: Sequence[int] = (10, 30, 50), draws: int = 100,
                      seed: int = 0) -> dict[int, list[list[str]]]:
    """Random asset subsets per size, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    assets = sorted(assets)
    out = {}
    for size in sizes:
        if size > len(assets):
            raise ValueError(f"subuniverse size {size} exceeds {len(assets)} assets")
        out[size] = [sorted(rng.choice(assets, size=size, replace=False).tolist()) for _ in range(draws)]
    return out


def subuniverse_experiment(returns: pd.DataFrame, methods: dict[str, Union[str, CovFn]],
                           sizes=(10, 30, 50), draws: int = 100, seed: int = 0, **kw) -> pd.DataFrame:
    """Average performance table per (size, method) over random subuniverses."""
    rows = []
    for size, subsets in subuniverse_draws(returns.columns, sizes, draws, seed).items():
        for name, cov in methods.items():
            reports = [rolling_backtest(returns[s], cov, **kw).report for s in subsets]
            mean = pd.concat(reports, axis=1).mean(axis=1)
            rows.append({"size": size, "method": name, **mean.to_dict()})
    return pd.DataFrame(rows)
