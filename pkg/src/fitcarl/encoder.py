"""Time-difference encoding and the time-aware Transformer for unseen entities.

An unseen entity is described by its K support facts. Each fact is rewritten
so the unseen entity is the object, the (neighbour, relation) pair is mapped to
a meta-representation, and a Transformer over ``[CLS] + meta-representations``
produces the entity vector. Attention logits get an additive bias computed
from the time difference between tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Vocab
from .numeric import Tensor, get_dtype, ops
from .params import ModelParams


def encode_time_diff(params: ModelParams, dt, temporal: bool = True) -> Tensor:
    """``sqrt(1/d) cos(omega * dt + phi)`` for every entry of ``dt``; zeros when ``temporal`` is off."""
    if not temporal:
        dt = np.asarray(dt)
        return Tensor(np.zeros(dt.shape + (params.d,)))
    return ops.time_encoding(dt, params["time.omega"], params["time.phi"])


def support_neighbors(e: int, support) -> list[tuple[int, int, int]]:
    """``(neighbour, relation, time)`` per support fact, oriented so that ``e`` is the object."""
    out = []
    for s, r, o, t in support:
        if o == e:
            out.append((s, r, t))
        elif s == e:
            out.append((o, Vocab.inverse_of(r), t))
        else:
            raise ValueError(f"support fact {(s, r, o, t)} does not involve entity {e}")
    return out


def meta_representations(params: ModelParams, neighbors, relations, ent_table: Tensor | None = None) -> Tensor:
    """Affine map of ``neighbour || relation``; index arrays of any shape ``S`` give ``S + (d,)``."""
    ent = params["ent"] if ent_table is None else ent_table
    neighbors, relations = np.asarray(neighbors), np.asarray(relations)
    if neighbors.size and (neighbors.min() < 0 or neighbors.max() >= ent.shape[0]):
        raise KeyError("support references an unknown entity id")
    if relations.size and (relations.min() < 0 or relations.max() >= params["rel"].shape[0]):
        raise KeyError("support references an unknown relation id")
    pair = ops.concat([ops.take(ent, neighbors), ops.take(params["rel"], relations)], axis=-1)
    return ops.linear(pair, params["enc.meta_w"], params["enc.meta_b"])


def _layer(params, pre, x, pos_te, n_heads, trace):
    B, S, d = x.shape
    dh = d // n_heads

    def heads(w):
        return ops.transpose(ops.reshape(ops.linear(x, params[pre + w]), (B, S, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    logits = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if pos_te is not None:
        bias = ops.linear(pos_te, params[pre + "pos"])  # (B, S, S, H)
        logits = ops.add(logits, ops.transpose(bias, (0, 3, 1, 2)))
    att = ops.softmax(logits, axis=-1)
    if trace is not None:
        trace.append({"logits": logits.data, "attention": att.data})
    mixed = ops.reshape(ops.transpose(ops.matmul(att, v), (0, 2, 1, 3)), (B, S, d))
    x = ops.layer_norm(ops.add(x, ops.linear(mixed, params[pre + "wo"], params[pre + "bo"])),
                       params[pre + "ln1_g"], params[pre + "ln1_b"])
    ff = ops.linear(ops.relu(ops.linear(x, params[pre + "ff1_w"], params[pre + "ff1_b"])),
                    params[pre + "ff2_w"], params[pre + "ff2_b"])
    return ops.layer_norm(ops.add(x, ff), params[pre + "ln2_g"], params[pre + "ln2_b"])


def transformer(params: ModelParams, tokens: Tensor, times, use_pos: bool = True, trace: list | None = None) -> Tensor:
    """Run the encoder stack over ``tokens`` (B, S, d) stamped with ``times`` (B, S); return token 0's output."""
    times = np.asarray(times, dtype=np.int64)
    B, S, _ = tokens.shape
    if times.shape != (B, S):
        raise ops.ShapeError(f"transformer: times {times.shape} vs tokens {tokens.shape}")
    pos_te = None
    if use_pos:
        pos_te = encode_time_diff(params, times[:, :, None] - times[:, None, :])
    x = tokens
    for i in range(params.n_layers):
        x = _layer(params, f"enc.l{i}.", x, pos_te, params.n_heads, trace)
    return ops.reshape(ops.slice_(x, 0, 1, axis=1), (B, params.d))


def _with_cls(params: ModelParams, meta: Tensor) -> Tensor:
    B = meta.shape[0]
    cls = ops.expand(ops.reshape(params["enc.cls"], (1, 1, params.d)), 0, B)
    return ops.concat([cls, meta], axis=1)


def encode_entity(params: ModelParams, meta: Tensor, times, t_query: int, use_pos: bool = True,
                  trace: list | None = None) -> Tensor:
    """Vector of one unseen entity from its (K, d) meta-representations and support times."""
    K = meta.shape[0]
    tokens = _with_cls(params, ops.reshape(meta, (1, K, params.d)))
    stamp = np.concatenate([[t_query], np.asarray(times, dtype=np.int64)])[None]
    return ops.reshape(transformer(params, tokens, stamp, use_pos, trace), (params.d,))


@dataclass
class UnseenEncoding:
    """Entity table for one episode plus the lookup from (entity, query) to table row.

    Rows are ``[parameter table | other unseen entities | query sources]``. The
    source of query ``q`` maps to its own row encoded at ``t_q``; other task
    entities map to a shared row (or to a per-query row when ``per_query``).
    """

    table: Tensor
    n_base: int
    entities: np.ndarray
    sources: np.ndarray
    per_query: bool

    def __post_init__(self):
        self._slot = np.full(self.n_base, -1, dtype=np.int64)
        self._slot[self.entities] = np.arange(len(self.entities))

    def rows(self, ents, query_idx) -> np.ndarray:
        ents = np.asarray(ents, dtype=np.int64)
        query_idx = np.broadcast_to(np.asarray(query_idx, dtype=np.int64), ents.shape)
        slot = self._slot[ents]
        n_u = len(self.entities)
        if self.per_query:
            other = self.n_base + query_idx * n_u + slot
            n_other = n_u * len(self.sources)
        else:
            other = self.n_base + slot
            n_other = n_u
        out = np.where(slot >= 0, other, ents)
        if len(self.sources):
            out = np.where(ents == self.sources[query_idx], self.n_base + n_other + query_idx, out)
        return out

    def lookup(self, ents, query_idx) -> Tensor:
        return ops.take(self.table, self.rows(ents, query_idx))

    def as_dict(self) -> dict[int, np.ndarray]:
        """Shared (mean-time) vector of every task entity."""
        if self.per_query:
            raise ValueError("per-query encodings have no single vector per entity")
        base = self.n_base
        return {int(e): self.table.data[base + i].copy() for i, e in enumerate(self.entities)}


def encode_all_unseen(params: ModelParams, task, queries=(), use_pos: bool = True,
                      per_query: bool = False) -> UnseenEncoding:
    """Encode every task entity once (CLS time = mean support time) and each query source at ``t_q``.

    ``queries`` is a sequence of ``(source, t_q)``.
    """
    ents = np.asarray(task.entities, dtype=np.int64)
    K = task.K
    nbr = np.zeros((len(ents), K), dtype=np.int64)
    rel = np.zeros((len(ents), K), dtype=np.int64)
    tim = np.zeros((len(ents), K), dtype=np.int64)
    for i, e in enumerate(ents.tolist()):
        for k, (n, r, t) in enumerate(support_neighbors(e, task.support[e])):
            nbr[i, k], rel[i, k], tim[i, k] = n, r, t
    base = params["ent"]
    n_base = base.shape[0]
    parts = [base]
    sources = np.asarray([q[0] for q in queries], dtype=np.int64)
    qtimes = np.asarray([q[1] for q in queries], dtype=np.int64)
    if len(ents):
        meta = meta_representations(params, nbr, rel)  # (N, K, d)
        slot = np.full(n_base, -1, dtype=np.int64)
        slot[ents] = np.arange(len(ents))
        if per_query and len(sources):
            pick = np.tile(np.arange(len(ents)), len(sources))
            cls_t = np.repeat(qtimes, len(ents))
        else:
            pick = np.arange(len(ents))
            cls_t = np.rint(tim.mean(axis=1)).astype(np.int64)
        if len(sources):
            if np.any(slot[sources] < 0):
                raise KeyError("query source is not a task entity")
            pick = np.concatenate([pick, slot[sources]])
            cls_t = np.concatenate([cls_t, qtimes])
        seq = _with_cls(params, ops.take(meta, pick))
        stamps = np.concatenate([cls_t[:, None], tim[pick]], axis=1)
        parts.append(transformer(params, seq, stamps, use_pos))
    table = ops.concat(parts, axis=0) if len(parts) > 1 else base
    return UnseenEncoding(table, n_base, ents, sources, per_query and len(sources) > 0)
