"""``simstock`` command line: ingest -> train -> embed -> similar -> pairs / track / optimize / ablate."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
import torch

from . import artifacts
from .config import ConfigError, RunConfig, load_config
from .data import (
    PanelError,
    build_domains,
    load_panel,
    normalize_features,
    quarterly_schedule,
    temporal_variants,
    to_samples,
)
from .evaluation import lambda_ablation, pipeline_runner
from .model import ModelConfig, ModelParams, NonFiniteError
from .pairs import PairConfig, aggregate_query, backtest_pair, grid_search
from .portfolio import (
    CovEstimate,
    embedding_cov,
    frobenius_tracking,
    rolling_backtest,
)
from .similarity import embed_universe, similarity_matrix, topk
from .synthetic import synthetic_panel
from .tdg import DivergenceError, TDGConfig, infer_next, train_sequence
from .tracking import track_report

logger = logging.getLogger("simstock")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CELL = 2, 3, 4, 5


class CellError(RuntimeError):
    """A per-cell failure (one pair, one report cell, one method) without --keep-going."""


class Run:
    """One invocation: the config plus lazily built, cached inputs."""

    def __init__(self, config: RunConfig, keep_going: bool = False):
        self.cfg = config
        self.keep_going = keep_going
        self.out = Path(config.paths.out)
        self.header = config.header()
        self._cache = {}

    def cached(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def panel(self):
        def build():
            c = self.cfg
            if c.paths.panel == "synthetic":
                s = c.synthetic
                return synthetic_panel(s.n_tickers, s.start, s.end, s.n_sectors, c.seed,
                                       s.n_duplicates, s.delist, s.late_list)
            return load_panel(c.paths.panel, c.paths.sectors)
        return self.cached("panel", build)

    @property
    def variants(self):
        return self.cached("variants", lambda: temporal_variants(normalize_features(self.panel),
                                                                  self.cfg.model.windows))

    @property
    def samples(self):
        return self.cached("samples", lambda: to_samples(self.variants, self.panel.sectors))

    def domains(self):
        d = self.cfg.domains
        return build_domains(self.variants, self.panel.sectors, quarterly_schedule(d.start, d.end))

    def model_config(self, lam=None) -> ModelConfig:
        m = self.cfg.model
        return ModelConfig(
            d_mk=5 * len(m.windows),
            sectors=tuple(sorted(set(self.panel.sectors.values()))),
            d=m.d, d_k=m.d_k, d_v=m.d_v,
            lam=m.lam if lam is None else lam,
            alpha=m.alpha, distance=m.distance,
        )

    def tdg_config(self, lam=None) -> TDGConfig:
        t = dataclasses.asdict(self.cfg.train)
        return TDGConfig(model=self.model_config(lam), seed=self.cfg.seed, **t)

    def write(self, frame: pd.DataFrame, name: str, index: bool = False) -> Path:
        path = artifacts.write_csv(frame, self.out / name, self.header, index=index)
        logger.info("wrote %s", path)
        return path

    def cell(self, label: str, fn: Callable, failures: list):
        try:
            return fn()
        except Exception as exc:  # noqa: BLE001 - cell isolation
            if not self.keep_going:
                raise CellError(f"{label}: {type(exc).__name__}: {exc}") from exc
            logger.error("%s failed: %s", label, exc)
            failures.append({"cell": label, "error": f"{type(exc).__name__}: {exc}"})
            return None

    # --- model artifacts ---------------------------------------------------
    def theta_next(self) -> ModelParams:
        def load():
            arrays, meta = artifacts.load_checkpoint(self.out / "checkpoint")
            mcfg = ModelConfig.from_dict(meta["model"])
            return ModelParams.unflatten(mcfg, torch.tensor(arrays["theta_next"]))
        return self.cached("theta", load)

    def embeddings(self, start=None, end=None):
        start = start or self.cfg.reference.start
        end = end or self.cfg.reference.end
        return self.cached(("emb", start, end), lambda: embed_universe(
            self.samples, self.theta_next(), start, end, universe=self.panel.tickers,
            period=f"{start}..{end}", model_id=self.cfg.hash()))

    def returns(self, start, end) -> pd.DataFrame:
        r = self.panel.returns_frame()
        return r.loc[pd.Timestamp(start) : pd.Timestamp(end)]

    def ranking(self, query: str, k: int, include_self: bool = False) -> list[str]:
        emb = self.embeddings()
        if query not in emb.tickers:
            raise KeyError(f"unknown or unembedded ticker {query!r}")
        ranked = [t for t, _ in topk(emb.vector(query), emb, k, self.cfg.similar.metric,
                                     query_ticker=None if include_self else query)]
        return ranked


# --- commands ----------------------------------------------------------------

def cmd_ingest(run: Run) -> None:
    panel = run.panel
    run.write(panel.to_frame(), "panel.csv")
    run.write(pd.DataFrame({"ticker": panel.tickers, "sector": [panel.sectors[t] for t in panel.tickers]}),
              "sectors.csv")
    print(f"{panel.n_tickers} tickers, {len(panel.dates)} dates, {int(panel.mask.sum())} rows")


def cmd_train(run: Run) -> None:
    domains = run.domains()
    cfg = run.tdg_config()
    gen, trace = train_sequence(domains, cfg)
    theta = infer_next(trace, gen)
    h, c = trace.final_state
    arrays = {
        "generator": gen.flatten().numpy(),
        "thetas": np.vstack(trace.thetas),
        "theta_next": theta,
        "state_h": h.numpy(),
        "state_c": c.numpy(),
    }
    meta = {
        "config_hash": run.cfg.hash(),
        "seed": run.cfg.seed,
        "model": cfg.model.to_dict(),
        "tdg": cfg.to_dict(),
        "n_params": cfg.model.n_params,
        "domains": [[str(d.start.date()), str(d.end.date())] for d in domains],
    }
    artifacts.save_checkpoint(run.out / "checkpoint", arrays, meta)
    rows = [{"domain": s, "start": d.start.date(), "end": d.end.date(), "n_samples": len(d),
             "loss_before": r.loss_before, "loss_after": r.loss_after}
            for s, (d, r) in enumerate(zip(domains, trace.records))]
    run.write(pd.DataFrame(rows), "train_log.csv")
    final = trace.records[-1].loss_after
    if not np.isfinite(final):
        raise DivergenceError(domains.T - 1, "non-finite final loss")
    print(f"trained on {domains.T} domains; final loss {final:.6f}")


def cmd_embed(run: Run) -> None:
    emb = run.embeddings()
    frame = emb.to_frame()
    run.write(frame, "embeddings.csv")
    if emb.omitted:
        print(f"omitted (no eligible days): {', '.join(emb.omitted)}")
    print(f"embedded {len(emb)} tickers for {emb.period}")


def cmd_similar(run: Run) -> None:
    c = run.cfg.similar
    emb = run.embeddings()
    queries = c.queries or emb.tickers
    rows = []
    for q in queries:
        if q not in emb.tickers:
            raise KeyError(f"unknown ticker {q!r}")
        for rank, (t, dist) in enumerate(topk(emb.vector(q), emb, c.k, c.metric, query_ticker=q), 1):
            rows.append({"query": q, "rank": rank, "ticker": t, "distance": dist})
    run.write(pd.DataFrame(rows), "similar.csv")
    print(f"ranked {len(queries)} queries, k={c.k}")


def _default_queries(run: Run, given) -> list[str]:
    if given:
        return list(given)
    return run.embeddings().tickers[:3]


def cmd_pairs(run: Run) -> None:
    c = run.cfg.pairs
    base = PairConfig(entry=c.entry, exit=c.exit, stop_loss=c.stop_loss, stop_mode=c.stop_mode,
                      capital=c.capital, cost_rate=c.cost)
    close = run.panel.close_frame()
    span = close.loc[pd.Timestamp(c.train.start) : pd.Timestamp(c.test.end)]
    n_train = int((span.index <= pd.Timestamp(c.train.end)).sum())
    summary, aggregates, failures = [], [], []
    for q in _default_queries(run, c.queries):
        partners = run.ranking(q, c.n_similar)
        ledgers, used = [], []
        for s in partners:
            def one(q=q, s=s):
                pair = span[[q, s]]
                if pair.isna().any().any():
                    raise ValueError(f"pair {q}/{s} lacks complete prices over train+test")
                pq, ps = pair[q].to_numpy(), pair[s].to_numpy()
                grid = grid_search(pq, ps, c.L1_grid, c.L2_grid, (0, n_train), base)
                ledger = backtest_pair(pq, ps, dataclasses.replace(base, L1=grid.L1, L2=grid.L2),
                                       dates=pair.index, start=n_train)
                return grid, ledger
            res = run.cell(f"pairs {q}/{s}", one, failures)
            if res is None:
                continue
            grid, ledger = res
            ledgers.append(ledger)
            used.append(s)
            summary.append({"query": q, "partner": s, "L1": grid.L1, "L2": grid.L2,
                            "tradable": grid.tradable, "entries": ledger.n_entries,
                            "terminal_wealth": ledger.terminal_wealth, "pnl": ledger.pnl,
                            "mdd": ledger.mdd})
        if ledgers:
            agg = aggregate_query(q, used, ledgers)
            aggregates.append({"query": q, "similar": ";".join(agg.similar), "mean_pnl": agg.mean_pnl,
                               "std_pnl": agg.std_pnl, "mean_mdd": agg.mean_mdd, "n_used": agg.n_used,
                               "excluded": ";".join(agg.excluded), "note": agg.annotation})
    run.write(pd.DataFrame(summary), "pairs_summary.csv")
    run.write(pd.DataFrame(aggregates), "pairs_aggregate.csv")
    if failures:
        run.write(pd.DataFrame(failures), "pairs_failures.csv")
    print(f"pairs: {len(summary)} backtests over {len(aggregates)} queries")


def _corr_ranking(returns: pd.DataFrame, query: str, k: int, include_self: bool) -> list[str]:
    full = returns.loc[:, returns.notna().all()]
    corr = full.corr()[query].drop(query) if not include_self else full.corr()[query]
    order = sorted(corr.index, key=lambda t: (-corr[t], t))
    return order[:k]


def cmd_track(run: Run) -> None:
    c = run.cfg.track
    ref = run.returns(run.cfg.reference.start, run.cfg.reference.end)
    test = run.returns(c.test.start, c.test.end)
    kmax = max(c.k_grid)
    targets = _default_queries(run, c.targets)
    rankings = {}
    for t in targets:
        for m in c.methods:
            if m == "SimStock":
                rankings[(t, m, "")] = run.ranking(t, kmax, c.include_self)
            elif m == "Corr":
                rankings[(t, m, "")] = _corr_ranking(ref, t, kmax, c.include_self)
            else:
                raise ConfigError("track.methods", f"unknown method {m!r}")
    failures = []
    parts = []
    for t in targets:
        for m in c.methods:
            res = run.cell(f"track {t}/{m}", lambda t=t, m=m: track_report(
                [t], [m], rankings, test, c.k_grid, ("",), rebalance=c.rebalance, tev_on=c.tev_on),
                failures)
            if res is not None:
                parts.append(res)
    report = pd.concat(parts, ignore_index=True) if parts else pd.DataFrame()
    if len(report):
        group = report.groupby(["target", "exchange", "k"])
        for col in ("TE", "TEV"):
            report[f"{col}_rank"] = group[col].rank(method="min").astype(int)
    run.write(report, "track_report.csv")
    if failures:
        run.write(pd.DataFrame(failures), "track_failures.csv")
    print(f"track: {len(report)} rows")


def monthly_returns(close: pd.DataFrame) -> pd.DataFrame:
    """Month-end close to month-end close returns (NaN where a month-end is absent)."""
    month_end = close.groupby(close.index.to_period("M")).tail(1)
    month_end = month_end.groupby(month_end.index.to_period("M")).last()
    counts = close.notna().groupby(close.index.to_period("M")).sum()
    full = counts.eq(counts.max(axis=1), axis=0)
    month_end = month_end.where(full)
    rets = month_end / month_end.shift(1) - 1.0
    rets.index = rets.index.to_timestamp(how="end").normalize()
    return rets.iloc[1:]


def _ss_cov(run: Run, metric: str, monthly: pd.DataFrame):
    def fn(window: pd.DataFrame, date) -> CovEstimate:
        lo = (window.index[0].to_period("M").start_time).strftime("%Y-%m-%d")
        hi = window.index[-1].strftime("%Y-%m-%d")
        emb = embed_universe(run.samples.between(lo, hi), run.theta_next())
        cols = list(window.columns)
        missing = [t for t in cols if t not in emb.tickers]
        if missing:
            raise ValueError(f"no embeddings for {missing} in {lo}..{hi}")
        sim = similarity_matrix(emb.subset(cols), metric)
        return embedding_cov(sim, window.std(ddof=1).to_numpy())
    return fn


def _cov_fn(run: Run, method: str, monthly: pd.DataFrame):
    if method in ("HC", "SM", "GS"):
        return method
    if method.startswith("SS-"):
        return _ss_cov(run, method[3:], monthly)
    raise ConfigError("optimize.methods", f"unknown method {method!r}")


def cmd_optimize(run: Run) -> None:
    c = run.cfg.optimize
    monthly = monthly_returns(run.panel.close_frame())
    first = pd.Timestamp(c.start)
    start = int((monthly.index < first).sum())
    if start < c.lookback:
        raise ConfigError("optimize.start", f"needs {c.lookback} months of history before it")
    targets = [("MVO", s) for s in c.risk_targets] + ([("MVP", None)] if c.mvp else [])
    failures, reports, ret_rows, w_rows, frob = [], {}, [], [], []
    for method in c.methods:
        cov = _cov_fn(run, method, monthly)
        for kind, sigma in targets:
            label = f"{method}@{kind}" + (f"{sigma:g}" if sigma is not None else "")
            res = run.cell(f"optimize {label}", lambda cov=cov, kind=kind, sigma=sigma: rolling_backtest(
                monthly, cov, "mvo" if kind == "MVO" else "mvp", sigma or 1.0, c.psi, c.lookback,
                start, c.risk_free), failures)
            if res is None:
                continue
            reports[label] = res.report
            frame = res.returns.reset_index()
            frame.insert(0, "portfolio", label)
            ret_rows.append(frame)
            w = res.weights.reset_index()
            w.insert(0, "portfolio", label)
            w_rows.append(w)
        frob.extend(_frobenius_rows(run, method, cov, monthly, start, c.lookback, failures))
    run.write(pd.DataFrame(reports), "perf_report.csv", index=True)
    run.write(pd.concat(ret_rows, ignore_index=True) if ret_rows else pd.DataFrame(), "optimize_returns.csv")
    run.write(pd.concat(w_rows, ignore_index=True) if w_rows else pd.DataFrame(), "optimize_weights.csv")
    run.write(pd.DataFrame(frob), "frobenius.csv")
    if failures:
        run.write(pd.DataFrame(failures), "optimize_failures.csv")
    print(f"optimize: {len(reports)} portfolios")


def _frobenius_rows(run, method, cov, monthly, start, lookback, failures):
    from .portfolio import cov_by_name

    fn = cov_by_name(cov) if isinstance(cov, str) else cov
    rows = []
    for t in range(start, len(monthly) - lookback + 1, lookback):
        past = monthly.iloc[t - lookback : t]
        future = monthly.iloc[t : t + lookback]
        cols = [a for a in monthly.columns if past[a].notna().all() and future[a].notna().all()]
        if len(cols) < 2:
            continue
        est = run.cell(f"frobenius {method} {monthly.index[t].date()}",
                       lambda: fn(past[cols], monthly.index[t]), failures)
        if est is None:
            continue
        M = est.corr if est.corr is not None else _to_corr(est.matrix)
        res = frobenius_tracking(M, past[cols].corr().to_numpy(), future[cols].corr().to_numpy())
        rows.append({"method": method, "past_end": past.index[-1].date(),
                     "future_end": future.index[-1].date(), "ratio": res.ratio,
                     "numerator": res.numerator, "denominator": res.denominator,
                     "flagged": res.flagged})
    return rows


def _to_corr(S: np.ndarray) -> np.ndarray:
    sd = np.sqrt(np.diag(S))
    return S / np.outer(sd, sd)


def cmd_ablate(run: Run) -> None:
    c = run.cfg.ablate
    domains = run.domains()
    reference = run.samples.between(run.cfg.reference.start, run.cfg.reference.end)
    test = run.returns(run.cfg.test.start, run.cfg.test.end)
    runner = pipeline_runner(domains, reference, test, run.tdg_config(), None, c.k_list,
                             run.cfg.similar.metric)
    result = lambda_ablation(runner, c.lambdas, c.k_list, run.keep_going)
    run.write(result.flagged("correlation"), "ablation_correlation.csv", index=True)
    run.write(result.flagged("dtw"), "ablation_dtw.csv", index=True)
    run.write(result.long_frame(), "ablation_long.csv")
    if result.failures:
        run.write(pd.DataFrame([{"lambda": k, "error": v} for k, v in result.failures.items()]),
                  "ablation_failures.csv")
    print(result.flagged("correlation").to_string())
    print(result.flagged("dtw").to_string())
    if result.failures and not run.keep_going:
        raise CellError(f"{len(result.failures)} lambda cells failed")


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "embed": cmd_embed,
    "similar": cmd_similar,
    "pairs": cmd_pairs,
    "track": cmd_track,
    "optimize": cmd_optimize,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simstock", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="YAML run configuration (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("--keep-going", action="store_true", help="record per-cell failures and continue")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.paths.out = args.out
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    torch.set_num_threads(1)
    try:
        cfg = resolve_config(args)
        run = Run(cfg, keep_going=args.keep_going)
        COMMANDS[args.command](run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CellError as exc:
        print(f"cell failure: {exc}", file=sys.stderr)
        return EXIT_CELL
    except (DivergenceError, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PanelError, KeyError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
