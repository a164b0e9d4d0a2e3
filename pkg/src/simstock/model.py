"""Representation network: sector-aware combined embedding, feature tokenizer,
dimension-corruption views, single-head self-attention and triplet objective.

Everything is written functionally over a :class:`ModelParams` bundle so the
same code path serves direct training (leaf tensors) and parameters produced
by the recurrent generator (non-leaf views of a generated flat vector).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

DTYPE = torch.float64
DISTANCES = ("euclidean", "cosine")


class NonFiniteError(FloatingPointError):
    """A forward pass produced NaN or inf."""


@dataclass(frozen=True)
class ModelConfig:
    d_mk: int
    sectors: tuple[str, ...]
    d: int = 64
    d_k: int = 64
    d_v: int = 64
    lam: float = 0.7
    alpha: float = 1.0
    embed_std: float = 0.02
    distance: str = "euclidean"

    def __post_init__(self):
        if min(self.d_mk, self.d, self.d_k, self.d_v) < 1:
            raise ValueError("all dimensions must be positive")
        if len(set(self.sectors)) != len(self.sectors) or not self.sectors:
            raise ValueError("sectors must be a non-empty list of unique labels")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}")

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Canonical parameter order used by flatten/unflatten."""
        d, dmk = self.d, self.d_mk
        return [
            ("static_embed", (len(self.sectors), dmk)),
            ("tok_weight", (dmk, d)),
            ("tok_bias", (dmk, d)),
            ("st_token", (d,)),
            ("w_q", (d, self.d_k)),
            ("w_k", (d, self.d_k)),
            ("w_v", (d, self.d_v)),
            ("out_w", (self.d_v, d)),
            ("out_b", (d,)),
        ]

    @property
    def n_params(self) -> int:
        return sum(math.prod(s) for _, s in self.shapes())

    def sector_index(self, labels) -> np.ndarray:
        lookup = {s: i for i, s in enumerate(self.sectors)}
        try:
            return np.fromiter((lookup[s] for s in labels), dtype=np.int64, count=len(labels))
        except KeyError as exc:
            raise KeyError(f"unknown sector id {exc.args[0]!r}") from None

    def to_dict(self) -> dict:
        return {
            "d_mk": self.d_mk,
            "sectors": list(self.sectors),
            "d": self.d,
            "d_k": self.d_k,
            "d_v": self.d_v,
            "lam": self.lam,
            "alpha": self.alpha,
            "embed_std": self.embed_std,
            "distance": self.distance,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["sectors"] = tuple(data["sectors"])
        return cls(**data)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, torch.Tensor] = field(repr=False)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def flatten(self) -> torch.Tensor:
        return torch.cat([self.tensors[n].reshape(-1) for n, _ in self.config.shapes()])

    @classmethod
    def unflatten(cls, config: ModelConfig, flat) -> "ModelParams":
        flat = torch.as_tensor(flat, dtype=DTYPE)
        if flat.ndim != 1 or flat.numel() != config.n_params:
            raise ValueError(f"flat vector has {flat.numel()} entries, expected {config.n_params}")
        tensors, pos = {}, 0
        for name, shape in config.shapes():
            n = math.prod(shape)
            tensors[name] = flat[pos : pos + n].view(shape)
            pos += n
        return cls(config, tensors)

    def numpy(self) -> np.ndarray:
        return self.flatten().detach().numpy().copy()

    def assert_finite(self) -> None:
        for name, t in self.tensors.items():
            if not torch.isfinite(t).all():
                raise NonFiniteError(f"non-finite entries in {name}")


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Gaussian sector table (sd ``embed_std``); uniform(+-1/sqrt(fan_in)) elsewhere."""
    rng = np.random.default_rng(seed)
    d = config.d
    tensors = {}
    for name, shape in config.shapes():
        if name == "static_embed":
            values = rng.normal(0.0, config.embed_std, size=shape)
        elif name == "out_b":
            values = np.zeros(shape)
        elif name in ("out_w",):
            bound = 1.0 / math.sqrt(config.d_v)
            values = rng.uniform(-bound, bound, size=shape)
        else:
            bound = 1.0 / math.sqrt(d)
            values = rng.uniform(-bound, bound, size=shape)
        tensors[name] = torch.tensor(values, dtype=DTYPE)
    return ModelParams(config, tensors)


def _as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64) if not torch.is_tensor(x) else x, dtype=DTYPE)


def combine(variant, sector_idx, params: ModelParams) -> torch.Tensor:
    """Variant vector plus the sector's static embedding (rows broadcast over a batch)."""
    table = params["static_embed"]
    idx = torch.as_tensor(sector_idx, dtype=torch.long)
    if idx.numel() and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise KeyError(f"unknown sector index in {idx.tolist()}")
    return _as_tensor(variant) + table[idx]


def tokenize(H, params: ModelParams) -> torch.Tensor:
    """``(..., d_mk)`` -> ``(..., d_mk + 1, d)``; row 0 is the [ST] token."""
    H = _as_tensor(H)
    W, b = params["tok_weight"], params["tok_bias"]
    if H.shape[-1] != W.shape[0]:
        raise ValueError(f"combined embedding has width {H.shape[-1]}, expected {W.shape[0]}")
    feats = b + H.unsqueeze(-1) * W
    st = params["st_token"].expand(*H.shape[:-1], 1, W.shape[1])
    return torch.cat([st, feats], dim=-2)


def permutation_matrix(idx) -> np.ndarray:
    """Matrix P with ``M @ P == M[:, idx]``."""
    idx = np.asarray(idx)
    P = np.zeros((len(idx), len(idx)))
    P[idx, np.arange(len(idx))] = 1.0
    return P


def draw_permutations(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    """``n`` independent uniform permutations of ``range(d)``, one per row."""
    return rng.permuted(np.tile(np.arange(d), (n, 1)), axis=1)


def permute_columns(tke: torch.Tensor, idx) -> torch.Tensor:
    """Right-multiply each sample's token matrix by its permutation matrix."""
    idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
    if tke.ndim == 2:
        return tke[:, idx]
    return torch.gather(tke, -1, idx.unsqueeze(-2).expand_as(tke))


@dataclass
class ViewPair:
    pos: torch.Tensor
    neg: torch.Tensor
    perm_pos: np.ndarray
    perm_neg: np.ndarray
    lam: float


def corrupt(tke: torch.Tensor, lam: float, rng: np.random.Generator, perms=None) -> ViewPair:
    """Positive/negative views mixing TKE with column-permuted copies of itself."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    d = tke.shape[-1]
    if d < 2:
        raise ValueError("dimension corruption needs d >= 2")
    batch = tke.shape[:-2]
    n = int(np.prod(batch)) if batch else 1
    if perms is None:
        pp = draw_permutations(rng, n, d)
        pn = draw_permutations(rng, n, d)
    else:
        pp, pn = perms
    shape = (*batch, d) if batch else (d,)
    pp, pn = pp.reshape(shape), pn.reshape(shape)
    pos = lam * tke + (1.0 - lam) * permute_columns(tke, pp)
    neg = (1.0 - lam) * tke + lam * permute_columns(tke, pn)
    if lam == 1.0:
        pos = tke.clone()
    return ViewPair(pos, neg, pp, pn, lam)


def attention(view: torch.Tensor, params: ModelParams) -> tuple[torch.Tensor, torch.Tensor]:
    """Full single-head attention output ``(..., d_c, d)`` and weights ``(..., d_c, d_c)``."""
    d = params["st_token"].shape[0]
    q = view @ params["w_q"]
    k = view @ params["w_k"]
    v = view @ params["w_v"]
    weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
    out = (weights @ v) @ params["out_w"] + params["out_b"]
    return out, weights


def attend(view: torch.Tensor, params: ModelParams) -> torch.Tensor:
    """[ST] row of the attention output."""
    out, _ = attention(view, params)
    st = out[..., 0, :]
    if not torch.isfinite(st).all():
        raise NonFiniteError("non-finite attention output")
    return st


def distance(a, b, kind: str = "euclidean"):
    """Row-wise distance along the last axis (tensors or arrays).

    ``cosine`` is ``1 - cos(a, b)``, bounded in [0, 2] and scale-free.
    """
    if torch.is_tensor(a):
        if kind == "euclidean":
            return torch.linalg.vector_norm(a - b, dim=-1)
        norms = torch.linalg.vector_norm(a, dim=-1) * torch.linalg.vector_norm(b, dim=-1)
        return 1.0 - (a * b).sum(-1) / norms
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if kind == "euclidean":
        return np.linalg.norm(a - b, axis=-1)
    norms = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    return 1.0 - (a * b).sum(-1) / norms


def triplet_loss(anchor, pos, neg, alpha: float, kind: str = "euclidean"):
    """``max(0, dist(anchor, pos) - dist(anchor, neg) + alpha)``; tensors or arrays."""
    if alpha <= 0:
        raise ValueError("margin must be positive")
    dp = distance(anchor, pos, kind)
    dn = distance(anchor, neg, kind)
    if torch.is_tensor(dp):
        return torch.clamp(dp - dn + alpha, min=0.0)
    return np.maximum(0.0, dp - dn + alpha)


def forward_embed(variant, sector_idx, params: ModelParams) -> torch.Tensor:
    """Uncorrupted path: combine -> tokenize -> attend."""
    return attend(tokenize(combine(variant, sector_idx, params), params), params)


def embed_array(X: np.ndarray, sectors, params: ModelParams, chunk: int = 4096) -> np.ndarray:
    """Batched :func:`forward_embed` over sample rows; ``sectors`` are labels."""
    idx = params.config.sector_index(list(sectors))
    out = np.empty((len(X), params.config.d))
    with torch.no_grad():
        for lo in range(0, len(X), chunk):
            z = forward_embed(X[lo : lo + chunk], idx[lo : lo + chunk], params)
            out[lo : lo + chunk] = z.numpy()
    return out


def ssl_loss(
    params: ModelParams,
    X,
    sector_idx,
    lam: float,
    alpha: float,
    rng: np.random.Generator | None = None,
    perms=None,
) -> torch.Tensor:
    """Mean triplet loss; anchor is the uncorrupted [ST] output of the same sample."""
    tke = tokenize(combine(X, sector_idx, params), params)
    views = corrupt(tke, lam, rng, perms=perms)
    anchor = attend(tke, params)
    st_pos = attend(views.pos, params)
    st_neg = attend(views.neg, params)
    loss = triplet_loss(anchor, st_pos, st_neg, alpha, params.config.distance).mean()
    if not torch.isfinite(loss):
        raise NonFiniteError("non-finite SSL loss")
    return loss


def loss_and_grads(
    X, sectors, params: ModelParams, lam: float, alpha: float, rng: np.random.Generator, perms=None
) -> tuple[float, ModelParams]:
    """SSL loss on a batch and its exact gradient, shaped like ``params``."""
    if len(X) == 0:
        raise ValueError("empty batch")
    idx = params.config.sector_index(list(sectors))
    flat = params.flatten().detach().clone().requires_grad_(True)
    p = ModelParams.unflatten(params.config, flat)
    loss = ssl_loss(p, X, idx, lam, alpha, rng, perms=perms)
    (grad,) = torch.autograd.grad(loss, flat)
    return float(loss.detach()), ModelParams.unflatten(params.config, grad)


def fixed_perms(rng: np.random.Generator, n: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """A reusable pair of permutation draws, e.g. for comparable held-out losses."""
    return draw_permutations(rng, n, d), draw_permutations(rng, n, d)


def evaluate_loss(params: ModelParams, X, sectors, lam: float, alpha: float, perms) -> float:
    idx = params.config.sector_index(list(sectors))
    with torch.no_grad():
        return float(ssl_loss(params, X, idx, lam, alpha, perms=perms))


@dataclass
class TrainSettings:
    steps: int = 200
    lr: float = 1e-3
    batch_size: int = 128


def fit(
    params: ModelParams,
    X: np.ndarray,
    sectors: Sequence[str],
    rng: np.random.Generator,
    settings: TrainSettings = TrainSettings(),
) -> tuple[ModelParams, list[float]]:
    """Adam on minibatches drawn with replacement from ``X``; returns new params and loss history."""
    cfg = params.config
    idx_all = cfg.sector_index(list(sectors))
    flat = params.flatten().detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([flat], lr=settings.lr)
    history = []
    n = len(X)
    for _ in range(settings.steps):
        b = rng.integers(0, n, size=min(settings.batch_size, n))
        p = ModelParams.unflatten(cfg, flat)
        loss = ssl_loss(p, X[b], idx_all[b], cfg.lam, cfg.alpha, rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    return ModelParams.unflatten(cfg, flat.detach().clone()), history
