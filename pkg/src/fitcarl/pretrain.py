"""ComplEx pretraining of background entity and relation vectors.

Vectors are stored as ``real || imag`` halves of length ``d``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import binio, kernels
from .graph import TkgStore, Vocab
from .numeric import AdamState, Tensor, adam_step, rng_stream

log = logging.getLogger(__name__)

EMB_MAGIC = b"CPXEMB1"


@dataclass
class ComplexEmbedding:
    entity: np.ndarray  # (n_entities, d)
    relation: np.ndarray  # (n_relation_ids, d)
    losses: list[float] = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.entity.shape[1]

    def score(self, s: int, r: int, o: int) -> float:
        return complex_score(self, s, r, o)

    def save(self, path) -> None:
        binio.save(path, EMB_MAGIC, {"version": 1, "d": self.d, "losses": self.losses},
                   {"entity": self.entity, "relation": self.relation})

    @classmethod
    def load(cls, path) -> "ComplexEmbedding":
        meta, arr = binio.load(path, EMB_MAGIC)
        return cls(arr["entity"], arr["relation"], list(meta.get("losses", [])))

    def export_text(self, path, vocab: Vocab) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# d={self.d}\n")
            for i, row in enumerate(self.entity):
                fh.write(f"E\t{i}\t{vocab.entities[i]}\t{' '.join(repr(float(x)) for x in row)}\n")
            for i, row in enumerate(self.relation):
                fh.write(f"R\t{i}\t{vocab.relation_name(i)}\t{' '.join(repr(float(x)) for x in row)}\n")


def complex_score(emb: ComplexEmbedding, s: int, r: int, o: int) -> float:
    """``Re(<e_s, w_r, conj(e_o)>)``."""
    n_e, n_r = emb.entity.shape[0], emb.relation.shape[0]
    if not (0 <= s < n_e and 0 <= o < n_e):
        raise KeyError(f"unknown entity id in ({s}, {o})")
    if not 0 <= r < n_r:
        raise KeyError(f"unknown relation id {r}")
    h = emb.d // 2
    es, wr, eo = emb.entity[s], emb.relation[r], emb.entity[o]
    a, b = es[:h], es[h:]
    c, dd = wr[:h], wr[h:]
    x, y = eo[:h], eo[h:]
    return float(np.sum(a * c * x + b * c * y + a * dd * y - b * dd * x))


def init_embedding(n_entities: int, n_relations: int, d: int, seed: int, scale: float = 0.1) -> ComplexEmbedding:
    if d % 2:
        raise ValueError(f"embedding size must be even, got {d}")
    rng = rng_stream(seed, "pretrain/init")
    return ComplexEmbedding(rng.normal(0.0, scale, (n_entities, d)), rng.normal(0.0, scale, (n_relations, d)))


def pretrain(background: TkgStore, d: int = 100, epochs: int = 50, neg_ratio: int = 10, seed: int = 0,
             lr: float = 0.01, batch_size: int = 1024) -> ComplexEmbedding:
    """Fit ComplEx with binary cross-entropy against uniformly corrupted objects.

    Facts are used in both directions, so inverse relations are trained too;
    timestamps are ignored.
    """
    if d % 2:
        raise ValueError(f"embedding size must be even, got {d}")
    if len(background) == 0:
        raise ValueError("cannot pretrain on an empty background graph")
    vocab = background.vocab
    emb = init_embedding(vocab.n_entities, vocab.n_relations, d, seed)
    if epochs <= 0:
        return emb
    s = np.concatenate([background.s, background.o])
    r = np.concatenate([background.r, Vocab.inverse_of(background.r)])
    o = np.concatenate([background.o, background.s])
    candidates = background.entities()
    E, R = Tensor(emb.entity, requires_grad=True), Tensor(emb.relation, requires_grad=True)
    state = AdamState.for_params([E, R], lr=lr)
    rng = rng_stream(seed, "pretrain/batches")
    n = len(s)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            m = len(idx)
            neg = candidates[rng.integers(0, len(candidates), m * neg_ratio)]
            bs = np.concatenate([s[idx], np.repeat(s[idx], neg_ratio)])
            br = np.concatenate([r[idx], np.repeat(r[idx], neg_ratio)])
            bo = np.concatenate([o[idx], neg])
            y = np.concatenate([np.ones(m), np.zeros(m * neg_ratio)])
            loss, gE, gR = kernels.complex_bce(E.data, R.data, bs, br, bo, y)
            adam_step([E, R], [gE, gR], state)
            total += loss * m
        emb.losses.append(total / n)
        log.info("pretrain epoch %d loss %.5f", epoch, emb.losses[-1])
    emb.entity, emb.relation = E.data, R.data
    return emb
