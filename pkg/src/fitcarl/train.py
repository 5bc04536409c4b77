"""Episodic meta-training with a discounted policy-gradient loss plus concept KL."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binio
from .agent import Variant, episode_net, sample_choices, variant_from_ablations
from .numeric import AdamState, StreamSet, Tape, Tensor, adam_step, ops
from .params import ModelParams, init_params
from .split import OogSplit, derive_queries, sample_task

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FITCARL1"


@dataclass
class TrainConfig:
    d: int = 100
    K: int = 1
    L: int = 3
    gamma: float = 0.95
    eta: float = 1e-9
    theta: float = 5.0
    cap: int = 50
    episodes: int = 1000
    lr: float = 1e-3
    seed: int = 0
    ablations: tuple[str, ...] = ()
    beam: int = 100
    valid_every: int = 50
    valid_beam: int = 0  # 0 means use ``beam``
    heads: int = 2
    layers: int = 2
    max_queries: int = 0  # 0 means every query of the episode
    per_query_cls: bool = False
    reward_grad: bool = False
    empty_prior: str = "uniform"
    endpoint_agg: str = "max"
    eval_seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    workers: int = 1
    pretrain_epochs: int = 50
    neg_ratio: int = 10

    def __post_init__(self):
        self.ablations = tuple(sorted(set(self.ablations)))
        self.eval_seeds = tuple(int(s) for s in self.eval_seeds)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        for name in ("d", "K", "L", "cap", "beam", "heads", "layers", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        if self.empty_prior not in ("uniform", "zero"):
            raise ValueError("empty_prior must be 'uniform' or 'zero'")
        if self.endpoint_agg not in ("max", "sum"):
            raise ValueError("endpoint_agg must be 'max' or 'sum'")
        variant_from_ablations(self.ablations)

    @property
    def variant(self) -> Variant:
        return variant_from_ablations(self.ablations)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["ablations"] = list(self.ablations)
        out["eval_seeds"] = list(self.eval_seeds)
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)


# ---------------------------------------------------------------- loss

def episode_loss(log_pi, kl, rewards, gamma: float, eta: float, n_queries: int) -> Tensor:
    """Discounted ``eta * KL - log pi * R`` summed over steps and queries, averaged per query.

    ``log_pi`` and ``kl`` are per-step tensors of shape (Q,); ``rewards`` per-step
    arrays (constants) or tensors.
    """
    total = None
    for step, (lp, k, r) in enumerate(zip(log_pi, kl, rewards)):
        r = r if isinstance(r, Tensor) else Tensor(np.asarray(r, dtype=np.float64))
        term = ops.sub(ops.scale(k, eta), ops.mul(lp, r))
        term = ops.scale(ops.sum(term), gamma ** step)
        total = term if total is None else ops.add(total, term)
    if total is None:
        return Tensor(0.0)
    return ops.scale(total, 1.0 / max(n_queries, 1))


def _reward_tensor(net, qidx, ents, theta) -> Tensor:
    h_ans = net.enc.lookup(net.q.answer[qidx], qidx)
    h_act = net.enc.lookup(ents, qidx)
    dist = ops.l2_norm(ops.sub(h_ans, h_act), axis=-1)
    return ops.sigmoid(ops.add(ops.scale(dist, -1.0), theta))


def rollout(net, cfg: TrainConfig, rng: np.random.Generator):
    """Sample one L-step walk per query; return per-step (log pi, KL, reward) and visited entities."""
    Q = len(net.q)
    qidx = np.arange(Q)
    rows = np.arange(Q)
    hidden, qstate = net.start(qidx)
    cur_e, cur_t = net.q.source.copy(), net.q.time.copy()
    has_prior = None
    if cfg.empty_prior == "zero" and net.concepts is not None and net.concepts.has_prior is not None:
        has_prior = net.concepts.has_prior[net.q.relation].astype(np.float64)
    log_pi, kls, rewards, path = [], [], [], []
    for step in range(cfg.L):
        out = net.step(qidx, cur_e, cur_t, hidden, qstate, rng)
        choice = sample_choices(out.pi.data, out.cand.mask, rng)
        log_pi.append(ops.log(ops.index(out.pi, (rows, choice))))
        kl = out.kl if has_prior is None else ops.mul(out.kl, Tensor(has_prior))
        kls.append(kl)
        ents, times = out.cand.ent[rows, choice], out.cand.time[rows, choice]
        if cfg.reward_grad:
            rewards.append(_reward_tensor(net, qidx, ents, cfg.theta))
        else:
            rewards.append(net.rewards(qidx, ents, cfg.theta))
        path.append(ents)
        if step + 1 < cfg.L:
            hidden = net.advance(hidden, out, choice)
        cur_e, cur_t = ents, times
    return log_pi, kls, rewards, path


# ---------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    params: ModelParams
    config: TrainConfig
    optimizer: AdamState | None = None
    rng_state: dict = field(default_factory=dict)
    episode: int = 0
    valid_mrr: float | None = None

    def to_bytes(self) -> bytes:
        names = list(self.params)
        header = {
            "version": 1,
            "config": self.config.to_dict(),
            "param_names": names,
            "rng_state": self.rng_state,
            "episode": self.episode,
            "valid_mrr": self.valid_mrr,
            "optimizer": None,
        }
        arrays = {f"p/{k}": v.data for k, v in self.params.items()}
        if self.optimizer is not None:
            o = self.optimizer
            header["optimizer"] = {"lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "step": o.step}
            for k, m, v in zip(names, o.m, o.v):
                arrays[f"m/{k}"] = m
                arrays[f"v/{k}"] = v
        return binio.dumps(CHECKPOINT_MAGIC, header, arrays)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, payload: bytes) -> "Checkpoint":
        meta, arr = binio.loads(CHECKPOINT_MAGIC, payload)
        names = meta["param_names"]
        params = ModelParams.from_arrays({k: arr[f"p/{k}"] for k in names}, order=names)
        opt = None
        if meta["optimizer"] is not None:
            opt = AdamState(**meta["optimizer"])
            opt.m = [arr[f"m/{k}"].copy() for k in names]
            opt.v = [arr[f"v/{k}"].copy() for k in names]
        cfg = TrainConfig.from_dict(meta["config"])
        return cls(params, cfg, opt, meta["rng_state"], meta["episode"], meta["valid_mrr"])

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def initial_params(split: OogSplit, cfg: TrainConfig, embedding=None) -> ModelParams:
    return init_params(split.vocab.n_entities, split.vocab.n_relations, cfg.d, cfg.seed, cfg.heads, cfg.layers,
                       embedding)


# ------------------------------------------------------------ training

class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    curve: list[tuple[int, float, float | None]]

    def write_curve(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "loss", "valid_mrr"])
            for ep, loss, mrr in self.curve:
                w.writerow([ep, repr(loss), "" if mrr is None else repr(mrr)])


def train_episode(params: ModelParams, split: OogSplit, cfg: TrainConfig, streams: StreamSet):
    task = sample_task(split, "meta_train", cfg.K, streams["task"])
    queries = [q for e in task.entities for q in derive_queries(task, e)]
    if cfg.max_queries and len(queries) > cfg.max_queries:
        pick = np.sort(streams["task"].choice(len(queries), cfg.max_queries, replace=False))
        queries = [queries[i] for i in pick]
    if not queries:
        raise RuntimeError("meta-train task has no queries; lower K or check the split")
    with Tape() as tape:
        net = episode_net(params, split.background, task, split.concepts, queries, cfg.variant, cfg.cap,
                          cfg.per_query_cls)
        log_pi, kl, rewards, _ = rollout(net, cfg, streams["rollout"])
        loss = episode_loss(log_pi, kl, rewards, cfg.gamma, cfg.eta, len(queries))
    if not np.isfinite(loss.item()):
        raise NonFiniteLoss(f"loss is {loss.item()} with {len(queries)} queries over {len(task.entities)} entities")
    grads = tape.gradients(loss, params.tensors())
    for name, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteLoss(f"non-finite gradient for parameter {name!r}")
    return loss.item(), grads


def meta_train(split: OogSplit, cfg: TrainConfig, params: ModelParams | None = None, embedding=None,
               validate=True) -> TrainResult:
    """Run ``cfg.episodes`` episodes; keep the checkpoint with the best meta-valid MRR.

    Validation runs before the first update, every ``valid_every`` episodes
    and after the last one.
    """
    from .evaluate import evaluate

    if params is None:
        params = initial_params(split, cfg, embedding)
    streams = StreamSet(cfg.seed)
    opt = AdamState.for_params(params.tensors(), lr=cfg.lr)
    curve: list[tuple[int, float, float | None]] = []

    def snapshot(episode, mrr):
        return Checkpoint(params.copy(), cfg, _copy_adam(opt), streams.state(), episode, mrr)

    def valid_mrr():
        if not validate:
            return None
        beam = cfg.valid_beam or cfg.beam
        rep = evaluate(split, params, "meta_valid", cfg, seeds=(cfg.seed,), beam=beam)
        return rep.mrr

    best = snapshot(0, valid_mrr())
    if cfg.episodes == 0:
        return TrainResult(best, best, curve)
    for ep in range(1, cfg.episodes + 1):
        loss, grads = train_episode(params, split, cfg, streams)
        adam_step(params.tensors(), grads, opt)
        mrr = None
        if validate and (ep % cfg.valid_every == 0 or ep == cfg.episodes):
            mrr = valid_mrr()
            log.info("episode %d loss %.5f valid mrr %.4f", ep, loss, mrr)
            if mrr > (best.valid_mrr if best.valid_mrr is not None else -1.0):
                best = snapshot(ep, mrr)
        curve.append((ep, loss, mrr))
    final = snapshot(cfg.episodes, curve[-1][2])
    if not validate:
        best = final
    return TrainResult(best, final, curve)


def _copy_adam(opt: AdamState) -> AdamState:
    out = AdamState(opt.lr, opt.beta1, opt.beta2, opt.eps, opt.step)
    out.m = [m.copy() for m in opt.m]
    out.v = [v.copy() for v in opt.v]
    return out
