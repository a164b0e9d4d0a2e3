"""Run configuration: nested dataclasses loaded from YAML with strict keys."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .data import DEFAULT_WINDOWS


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


@dataclass
class PathsConfig:
    panel: str = "synthetic"  # CSV path, or "synthetic" for the bundled generator
    sectors: Optional[str] = None
    out: str = "out"


@dataclass
class SyntheticConfig:
    n_tickers: int = 48  # plus the duplicates: 50 in total
    start: str = "2018-01-01"
    end: str = "2023-12-31"
    n_sectors: int = 5
    n_duplicates: int = 2
    delist: int = 2
    late_list: int = 2


@dataclass
class ModelSection:
    d: int = 64
    d_k: int = 64
    d_v: int = 64
    windows: list = field(default_factory=lambda: list(DEFAULT_WINDOWS))
    lam: float = 0.7
    alpha: float = 1.0
    distance: str = "euclidean"


@dataclass
class DomainSection:
    start: str = "2018-01-01"
    end: str = "2019-12-31"  # 8 quarterly domains


@dataclass
class TrainSection:
    hidden: int = 128
    first_steps: int = 200
    inner_steps: int = 50
    gen_steps: int = 10
    epochs: int = 3
    lr: float = 1e-3
    gen_lr: float = 1e-4
    batch_size: int = 128
    gen_batch_size: int = 512
    bptt: int = 3
    eval_size: int = 512
    up_scale: float = 0.01
    residual: bool = True


@dataclass
class PeriodSection:
    start: str = "2020-01-01"
    end: str = "2020-12-31"


@dataclass
class SimilarSection:
    queries: list = field(default_factory=list)  # empty: every ticker
    k: int = 10
    metric: str = "L2"


@dataclass
class PairsSection:
    queries: list = field(default_factory=list)
    n_similar: int = 3
    L1_grid: list = field(default_factory=lambda: [5, 10, 20, 40])
    L2_grid: list = field(default_factory=lambda: [20, 40, 60, 120])
    entry: float = 1.25
    exit: float = 0.5
    stop_loss: float = 500.0
    stop_mode: str = "relative"
    capital: float = 10_000.0
    cost: float = 0.001
    train: PeriodSection = field(default_factory=lambda: PeriodSection("2020-01-01", "2021-12-31"))
    test: PeriodSection = field(default_factory=lambda: PeriodSection("2022-01-01", "2023-12-31"))


@dataclass
class TrackSection:
    targets: list = field(default_factory=list)
    methods: list = field(default_factory=lambda: ["SimStock", "Corr"])
    k_grid: list = field(default_factory=lambda: [10, 15, 20, 25, 30, 35])
    include_self: bool = False
    rebalance: str = "hold"
    tev_on: str = "cumulative"
    test: PeriodSection = field(default_factory=lambda: PeriodSection("2021-01-01", "2023-12-31"))


@dataclass
class OptimizeSection:
    methods: list = field(default_factory=lambda: ["SS-L2", "HC", "SM", "GS"])
    risk_targets: list = field(default_factory=lambda: [0.24, 0.27, 0.30, 0.33])
    mvp: bool = True
    psi: float = 0.001
    lookback: int = 12
    risk_free: float = 0.0
    start: str = "2021-01-01"


@dataclass
class AblateSection:
    lambdas: list = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9])
    k_list: list = field(default_factory=lambda: [1, 3, 5, 7, 9])


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelSection = field(default_factory=ModelSection)
    domains: DomainSection = field(default_factory=DomainSection)
    train: TrainSection = field(default_factory=TrainSection)
    reference: PeriodSection = field(default_factory=lambda: PeriodSection("2020-01-01", "2020-12-31"))
    test: PeriodSection = field(default_factory=lambda: PeriodSection("2021-01-01", "2021-12-31"))
    similar: SimilarSection = field(default_factory=SimilarSection)
    pairs: PairsSection = field(default_factory=PairsSection)
    track: TrackSection = field(default_factory=TrackSection)
    optimize: OptimizeSection = field(default_factory=OptimizeSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Digest of the canonical JSON form; output paths do not count."""
        data = self.to_dict()
        data["paths"] = {k: v for k, v in data["paths"].items() if k != "out"}
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def header(self) -> str:
        return f"# config_hash={self.hash()} seed={self.seed}"

    def validate(self) -> "RunConfig":
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        if self.paths.panel != "synthetic" and not Path(self.paths.panel).exists():
            raise ConfigError("paths.panel", f"file not found: {self.paths.panel}")
        if self.paths.sectors is not None and not Path(self.paths.sectors).exists():
            raise ConfigError("paths.sectors", f"file not found: {self.paths.sectors}")
        m = self.model
        for key in ("d", "d_k", "d_v"):
            if getattr(m, key) < 1:
                raise ConfigError(f"model.{key}", "must be positive")
        if not m.windows or any(int(w) < 1 for w in m.windows):
            raise ConfigError("model.windows", "need positive window lengths")
        if not 0 <= m.lam <= 1:
            raise ConfigError("model.lam", "must lie in [0, 1]")
        if m.alpha <= 0:
            raise ConfigError("model.alpha", "must be positive")
        if m.distance not in ("euclidean", "cosine"):
            raise ConfigError("model.distance", "must be 'euclidean' or 'cosine'")
        if self.similar.metric not in ("L2", "L1", "cosine"):
            raise ConfigError("similar.metric", "must be L2, L1 or cosine")
        if any(not 0 < s for s in self.optimize.risk_targets):
            raise ConfigError("optimize.risk_targets", "must be positive")
        for lam in self.ablate.lambdas:
            if not 0 <= lam <= 1:
                raise ConfigError("ablate.lambdas", f"{lam} outside [0, 1]")
        if self.pairs.stop_mode not in ("relative", "absolute"):
            raise ConfigError("pairs.stop_mode", "must be 'relative' or 'absolute'")
        if self.track.rebalance not in ("period", "hold"):
            raise ConfigError("track.rebalance", "must be 'period' or 'hold'")
        if self.track.tev_on not in ("cumulative", "period"):
            raise ConfigError("track.tev_on", "must be 'cumulative' or 'period'")
        return self


def _build(cls, data: Any, prefix: str, base=None):
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", "expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{prefix}{unknown[0]}", "unknown key")
    default = cls() if base is None else base
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        value = data[name]
        current = getattr(default, name)
        key = f"{prefix}{name}"
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, key + ".", current)
        elif isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(key, "expected true/false")
            kwargs[name] = value
        elif isinstance(current, (int, float)) and not isinstance(current, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(key, f"expected a number, got {value!r}")
            if isinstance(current, int) and not isinstance(value, int):
                raise ConfigError(key, f"expected an integer, got {value!r}")
            kwargs[name] = type(current)(value) if isinstance(current, float) else value
        elif isinstance(current, list):
            if not isinstance(value, list):
                raise ConfigError(key, "expected a list")
            kwargs[name] = value
        else:
            if value is not None and not isinstance(value, str):
                raise ConfigError(key, "expected a string")
            kwargs[name] = str(value) if value is not None else None
    return dataclasses.replace(default, **kwargs)


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("--config", f"file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("--config", f"invalid YAML: {exc}") from None
    return from_dict(data or {})


def dump_config(config: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
