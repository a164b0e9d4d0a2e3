"""Recurrent parameter generator for temporal domain generalization.

A single LSTM cell runs over a learned low-dimensional code of the
representation-model parameter vector. Trained on the sequence of source
domains, it proposes parameters for the next, unseen domain.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .data import DomainSequence, SampleSet
from .model import (
    DTYPE,
    ModelConfig,
    ModelParams,
    NonFiniteError,
    TrainSettings,
    evaluate_loss,
    fit,
    fixed_perms,
    init_params,
    ssl_loss,
)

logger = logging.getLogger(__name__)

GEN_SHAPES = ("down_w", "down_b", "w_ih", "w_hh", "b", "up_w", "up_b")


class DivergenceError(FloatingPointError):
    def __init__(self, domain: int, message: str):
        super().__init__(f"domain {domain}: {message}")
        self.domain = domain


@dataclass
class GeneratorParams:
    """down: R^P -> R^h, LSTM cell on R^h (gate order i, f, g, o), up: R^h -> R^P.

    With ``residual`` the up-projection is added to the input parameters
    instead of replacing them.
    """

    tensors: dict[str, torch.Tensor]
    residual: bool = False

    @property
    def hidden(self) -> int:
        return self.tensors["down_b"].shape[0]

    @property
    def n_out(self) -> int:
        return self.tensors["up_b"].shape[0]

    def __getitem__(self, name):
        return self.tensors[name]

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, tuple(self.tensors[n].shape)) for n in GEN_SHAPES]

    def flatten(self) -> torch.Tensor:
        return torch.cat([self.tensors[n].reshape(-1) for n in GEN_SHAPES])

    @classmethod
    def unflatten(cls, P: int, h: int, flat, residual: bool = False) -> "GeneratorParams":
        flat = torch.as_tensor(flat, dtype=DTYPE)
        shapes = generator_shapes(P, h)
        if flat.ndim != 1 or flat.numel() != sum(math.prod(s) for _, s in shapes):
            raise ValueError("flat generator vector has the wrong length")
        tensors, pos = {}, 0
        for name, shape in shapes:
            n = math.prod(shape)
            tensors[name] = flat[pos : pos + n].view(shape)
            pos += n
        return cls(tensors, residual)

    def detached(self) -> "GeneratorParams":
        return GeneratorParams({k: v.detach().clone() for k, v in self.tensors.items()}, self.residual)

    def assert_finite(self):
        for name, t in self.tensors.items():
            if not torch.isfinite(t).all():
                raise NonFiniteError(f"non-finite generator weights in {name}")


def generator_shapes(P: int, h: int) -> list[tuple[str, tuple[int, ...]]]:
    if h < 1:
        raise ValueError("hidden size must be >= 1")
    return [
        ("down_w", (h, P)),
        ("down_b", (h,)),
        ("w_ih", (4 * h, h)),
        ("w_hh", (4 * h, h)),
        ("b", (4 * h,)),
        ("up_w", (P, h)),
        ("up_b", (P,)),
    ]


def init_generator(
    P: int, h: int, seed: int, up_bias=None, up_scale: float = 0.01, residual: bool = False
) -> GeneratorParams:
    """Uniform fan-in init with a small up-projection.

    A direct generator starts near ``up_bias`` (e.g. theta_1); a residual one
    starts near the identity map on parameters.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in generator_shapes(P, h):
        if name == "down_w":
            v = rng.uniform(-1, 1, size=shape) / math.sqrt(P)
        elif name in ("w_ih", "w_hh"):
            v = rng.uniform(-1, 1, size=shape) / math.sqrt(h)
        elif name == "up_w":
            v = rng.uniform(-1, 1, size=shape) * up_scale / math.sqrt(h)
        elif name == "up_b" and up_bias is not None and not residual:
            v = np.asarray(up_bias, dtype=float).copy()
        else:
            v = np.zeros(shape)
        tensors[name] = torch.tensor(v, dtype=DTYPE)
    return GeneratorParams(tensors, residual)


def identity_generator(P: int) -> GeneratorParams:
    """Sanity configuration h = P with identity down/up maps and zero biases."""
    gen = init_generator(P, P, seed=0)
    gen.tensors["down_w"] = torch.eye(P, dtype=DTYPE)
    gen.tensors["up_w"] = torch.eye(P, dtype=DTYPE)
    gen.tensors["up_b"] = torch.zeros(P, dtype=DTYPE)
    return gen


State = tuple[torch.Tensor, torch.Tensor]


def zero_state(h: int) -> State:
    return torch.zeros(h, dtype=DTYPE), torch.zeros(h, dtype=DTYPE)


def step(state: State, theta_in, gen: GeneratorParams) -> tuple[State, torch.Tensor]:
    """One generator unit: ``theta_out = up(cell(down(theta_in), state))``, plus
    ``theta_in`` for a residual generator."""
    theta_in = torch.as_tensor(theta_in, dtype=DTYPE)
    h_prev, c_prev = state
    x = gen["down_w"] @ theta_in + gen["down_b"]
    gates = gen["w_ih"] @ x + gen["w_hh"] @ h_prev + gen["b"]
    i, f, g, o = gates.chunk(4)
    c = torch.sigmoid(f) * c_prev + torch.sigmoid(i) * torch.tanh(g)
    h = torch.sigmoid(o) * torch.tanh(c)
    out = gen["up_w"] @ h + gen["up_b"]
    if gen.residual:
        out = theta_in + out
    if not torch.isfinite(out).all():
        raise NonFiniteError("generator produced non-finite parameters")
    return (h, c), out


@dataclass
class TDGConfig:
    model: ModelConfig
    seed: int = 0
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

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "model"}
        out["model"] = self.model.to_dict()
        return out


@dataclass
class DomainRecord:
    generated: Optional[np.ndarray]
    refined: np.ndarray
    loss_before: float
    loss_after: float


@dataclass
class TrainTrace:
    records: list[DomainRecord] = field(default_factory=list)
    final_state: Optional[State] = None
    model_config: Optional[ModelConfig] = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def thetas(self) -> list[np.ndarray]:
        return [r.refined for r in self.records]

    def theta(self, s: int) -> ModelParams:
        """Refined parameters of domain ``s`` (0-based)."""
        return ModelParams.unflatten(self.model_config, torch.tensor(self.records[s].refined))


def _eval_batch(samples: SampleSet, size: int, d: int, seed: int):
    rng = np.random.default_rng(seed)
    n = len(samples)
    idx = np.sort(rng.choice(n, size=min(size, n), replace=False))
    perms = fixed_perms(rng, len(idx), d)
    return samples.X[idx], samples.sectors[idx], perms


def train_sequence(domains: DomainSequence, config: TDGConfig) -> tuple[GeneratorParams, TrainTrace]:
    """Fit theta_1 on the first domain, then learn the generator over domains 2..T.

    For every later domain the generator proposes parameters from the refined
    trajectory so far; its weights take ``gen_steps`` Adam steps on the SSL
    loss of the proposal (backpropagating through at most ``bptt`` recurrent
    steps). The proposal is then refined with ``inner_steps`` SSL steps and
    the refined parameters are fed to the next step. The whole pass repeats
    for ``epochs`` passes; the trace holds the last pass.
    """
    if domains.T < 2:
        raise ValueError("need at least two source domains")
    mcfg = config.model
    rng = np.random.default_rng(config.seed)
    evals = [
        _eval_batch(dom.samples, config.eval_size, mcfg.d, config.seed + 7919 * (s + 1))
        for s, dom in enumerate(domains)
    ]

    def eval_loss(params, s):
        X, sec, perms = evals[s]
        value = evaluate_loss(params, X, sec, mcfg.lam, mcfg.alpha, perms)
        if not math.isfinite(value):
            raise DivergenceError(s, "non-finite loss")
        return value

    first = domains[0].samples
    theta1 = init_params(mcfg, config.seed)
    before = eval_loss(theta1, 0)
    try:
        theta1, _ = fit(theta1, first.X, first.sectors, rng,
                        TrainSettings(config.first_steps, config.lr, config.batch_size))
    except NonFiniteError as exc:
        raise DivergenceError(0, str(exc)) from exc
    first_record = DomainRecord(None, theta1.numpy(), before, eval_loss(theta1, 0))
    logger.info("domain 0: loss %.5f -> %.5f", first_record.loss_before, first_record.loss_after)

    P = mcfg.n_params
    gen = init_generator(P, config.hidden, config.seed + 1, up_bias=first_record.refined,
                         up_scale=config.up_scale, residual=config.residual)
    for t in gen.tensors.values():
        t.requires_grad_(True)
    opt = torch.optim.Adam(list(gen.tensors.values()), lr=config.gen_lr)
    inner = TrainSettings(config.inner_steps, config.lr, config.batch_size)

    trace = TrainTrace(model_config=mcfg)
    for epoch in range(config.epochs):
        traj = [torch.tensor(first_record.refined)]
        states = [zero_state(config.hidden)]
        records = [first_record]
        for s in range(1, domains.T):
            dom = domains[s].samples
            k = min(config.bptt, s)
            sec_idx = mcfg.sector_index(list(dom.sectors))
            for _ in range(config.gen_steps):
                st = states[s - k]
                for j in range(s - k, s):
                    st, out = step(st, traj[j], gen)
                b = rng.integers(0, len(dom), size=min(config.gen_batch_size, len(dom)))
                try:
                    loss = ssl_loss(ModelParams.unflatten(mcfg, out), dom.X[b], sec_idx[b],
                                    mcfg.lam, mcfg.alpha, rng)
                except NonFiniteError as exc:
                    raise DivergenceError(s, str(exc)) from exc
                opt.zero_grad()
                loss.backward()
                opt.step()
            with torch.no_grad():
                st = states[s - k]
                for j in range(s - k, s):
                    st, out = step(st, traj[j], gen)
            states.append((st[0].detach(), st[1].detach()))
            proposal = ModelParams.unflatten(mcfg, out.detach().clone())
            loss_before = eval_loss(proposal, s)
            try:
                refined, _ = fit(proposal, dom.X, dom.sectors, rng, inner)
            except NonFiniteError as exc:
                raise DivergenceError(s, str(exc)) from exc
            loss_after = eval_loss(refined, s)
            records.append(DomainRecord(proposal.numpy(), refined.numpy(), loss_before, loss_after))
            traj.append(refined.flatten().detach())
            logger.info("epoch %d domain %d: proposal %.5f refined %.5f",
                        epoch, s, loss_before, loss_after)
        trace.records = records

    final = gen.detached()
    st = zero_state(config.hidden)
    with torch.no_grad():
        for rec in trace.records[:-1]:
            st, _ = step(st, torch.tensor(rec.refined), final)
    trace.final_state = st
    return final, trace


def infer_next(trace: TrainTrace, gen: GeneratorParams) -> np.ndarray:
    """theta_{T+1} from the final recurrent state and the last refined theta.

    Takes no samples by construction: the target domain is never read.
    """
    if trace.final_state is None or not trace.records:
        raise ValueError("trace has no trained state")
    with torch.no_grad():
        _, out = step(trace.final_state, torch.tensor(trace.records[-1].refined), gen)
    return out.numpy().copy()


@dataclass
class DriftResult:
    seed: int
    generated: float  # held-out loss of the generated parameters
    frozen: float  # held-out loss of the last refined parameters

    @property
    def improved(self) -> bool:
        return self.generated < self.frozen


def drift_benchmark(seed: int, n_train: int = 8, n_tickers: int = 40, d: int = 16,
                    lam: float = 0.6, alpha: float = 1.0, scale: float = 1.0,
                    **overrides) -> DriftResult:
    """Train on ``n_train`` rotating-AR(1) domains and score generated vs frozen
    parameters on the held-out next domain with one fixed permutation draw."""
    from .synthetic import drifting_domains

    seq, sectors = drifting_domains(seed=seed, n_domains=n_train + 1, n_tickers=n_tickers, scale=scale)
    train = DomainSequence(seq.domains[:n_train])
    target = seq.domains[n_train].samples
    mcfg = ModelConfig(d_mk=target.X.shape[1], sectors=sectors, d=d, d_k=d, d_v=d, lam=lam, alpha=alpha)
    settings = dict(epochs=2, gen_steps=10, inner_steps=50)
    settings.update(overrides)
    cfg = TDGConfig(model=mcfg, seed=seed, **settings)
    gen, trace = train_sequence(train, cfg)
    nxt = ModelParams.unflatten(mcfg, infer_next(trace, gen))
    perms = fixed_perms(np.random.default_rng(123), len(target), d)
    lg = evaluate_loss(nxt, target.X, target.sectors, lam, alpha, perms)
    lf = evaluate_loss(trace.theta(n_train - 1), target.X, target.sectors, lam, alpha, perms)
    return DriftResult(seed, lg, lf)
