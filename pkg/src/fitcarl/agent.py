"""Search environment and confidence-augmented policy network.

The agent walks from a query's source entity over timestamped edges. Every
step it samples a bounded action space, scores it with a history-dependent
probability and a history-independent confidence, and blends the two into the
policy. Rows of a batch are independent walkers (rollouts or beam entries);
each row points at the query it serves.
"""

from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .encoder import UnseenEncoding, encode_all_unseen, encode_time_diff
from .graph import SELF_LOOP, ConceptTable, TkgStore, Vocab
from .numeric import Tensor, ops
from .numeric.ops import LOG_EPS
from .params import ModelParams

SAMPLE_MODES = ("time_adaptive", "random", "time_proximity")


# ------------------------------------------------------------------ MDP

@dataclass(frozen=True)
class SearchState:
    current_entity: int
    current_time: int
    source: int
    query_relation: int
    query_time: int
    step: int = 0

    @classmethod
    def initial(cls, source: int, relation: int, query_time: int) -> "SearchState":
        return cls(source, query_time, source, relation, query_time, 0)


@dataclass(frozen=True)
class ActionCandidate:
    relation: int
    entity: int
    time: int
    is_self_loop: bool = False


def transition(state: SearchState, action: ActionCandidate) -> SearchState:
    return replace(state, current_entity=action.entity, current_time=action.time, step=state.step + 1)


def reward(h_answer: np.ndarray, h_action: np.ndarray, theta: float = 5.0) -> np.ndarray:
    """``sigmoid(theta - ||h_answer - h_action||)`` along the last axis."""
    dist = np.linalg.norm(np.asarray(h_answer) - np.asarray(h_action), axis=-1)
    return 1.0 / (1.0 + np.exp(-(theta - dist)))


@dataclass(frozen=True)
class Variant:
    """Model switches; see :func:`variant_from_ablations`."""

    sample_mode: str = "time_adaptive"
    use_confidence: bool = True
    use_concepts: bool = True
    use_pos: bool = True
    temporal: bool = True


ABLATIONS = ("A1", "A2", "B", "C", "D", "E")


def variant_from_ablations(flags=()) -> Variant:
    flags = set(flags)
    unknown = flags - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablation flags {sorted(unknown)}; expected a subset of {ABLATIONS}")
    if {"A1", "A2"} <= flags:
        raise ValueError("ablations A1 and A2 are mutually exclusive")
    if "E" in flags:
        flags |= {"A1", "D"}
    mode = "random" if "A1" in flags else "time_proximity" if "A2" in flags else "time_adaptive"
    return Variant(mode, "B" not in flags, "C" not in flags, "D" not in flags, "E" not in flags)


# --------------------------------------------------------- action graph

class ActionGraph:
    """Outgoing edges over the background graph plus the support facts of a task.

    Support facts get consecutive key ids so a query can hide its own fact
    when that fact is also another entity's support.
    """

    def __init__(self, background: TkgStore, support_facts=()):
        self.background = background
        facts = list(support_facts)
        uniq: dict[tuple, int] = {}
        keys = [uniq.setdefault(tuple(map(int, f)), len(uniq)) for f in facts]
        self._key_of = uniq
        arr = np.asarray(facts, dtype=np.int64).reshape(-1, 4)
        self.support = TkgStore(background.vocab, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])
        self._support_key = np.asarray(keys, dtype=np.int64)[self.support.edge_fact] if facts else np.zeros(0, np.int64)

    def fact_key(self, fact) -> int:
        """Key id of a support fact given in (s, r, o, t) form, or -1."""
        return self._key_of.get(tuple(map(int, fact)), -1)

    @staticmethod
    def _ranges(store: TkgStore, ents: np.ndarray):
        ok = ents < store.n_nodes
        safe = np.where(ok, ents, 0)
        lo = np.where(ok, store.indptr[safe], 0)
        n = np.where(ok, store.indptr[safe + 1] - lo, 0)
        row = np.repeat(np.arange(len(ents)), n)
        idx = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n) + np.repeat(lo, n)
        return row, idx

    def gather(self, ents):
        """Flattened edges of each entity in ``ents``: background first, then supports, file order."""
        ents = np.asarray(ents, dtype=np.int64)
        bg, sp = self.background, self.support
        r1, i1 = self._ranges(bg, ents)
        r2, i2 = self._ranges(sp, ents)
        row = np.concatenate([r1, r2])
        order = np.argsort(row, kind="stable")
        rel = np.concatenate([bg.edge_rel[i1], sp.edge_rel[i2]])[order]
        dst = np.concatenate([bg.edge_dst[i1], sp.edge_dst[i2]])[order]
        tim = np.concatenate([bg.edge_time[i1], sp.edge_time[i2]])[order]
        key = np.concatenate([np.full(len(i1), -1, dtype=np.int64), self._support_key[i2]])[order]
        row = row[order]
        ptr = np.zeros(len(ents) + 1, dtype=np.int64)
        np.cumsum(np.bincount(row, minlength=len(ents)), out=ptr[1:])
        return ptr, rel, dst, tim, key


@dataclass
class CandidateBatch:
    """Padded per-row candidates; the self-loop sits right after each row's edges."""

    rel: np.ndarray
    ent: np.ndarray
    time: np.ndarray
    mask: np.ndarray
    self_loop: np.ndarray

    @property
    def shape(self):
        return self.rel.shape

    def counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def row(self, b: int) -> list[ActionCandidate]:
        n = int(self.mask[b].sum())
        return [ActionCandidate(int(self.rel[b, a]), int(self.ent[b, a]), int(self.time[b, a]), bool(self.self_loop[b, a]))
                for a in range(n)]


def sample_action_space(graph: ActionGraph, cur_ent, cur_time, query_time, params: ModelParams | None = None,
                        mode: str = "time_adaptive", cap: int = 50, rng: np.random.Generator | None = None,
                        hidden_key=None) -> CandidateBatch:
    """Bounded action space of each row plus a self-loop.

    ``time_adaptive`` keeps the ``cap`` edges with the highest
    ``w_dt . h(t_q - t)``; ``random`` a uniform sample; ``time_proximity`` the
    edges closest in time to the current node. Ties keep edge order.
    ``hidden_key`` holds, per row, a support key id whose edges are removed.
    """
    if cap < 1:
        raise ValueError(f"action cap must be >= 1, got {cap}")
    if mode not in SAMPLE_MODES:
        raise ValueError(f"unknown sampling mode {mode!r}")
    cur_ent = np.asarray(cur_ent, dtype=np.int64)
    cur_time = np.asarray(cur_time, dtype=np.int64)
    query_time = np.asarray(query_time, dtype=np.int64)
    B = len(cur_ent)
    ptr, rel, dst, tim, key = graph.gather(cur_ent)
    row = np.repeat(np.arange(B), np.diff(ptr))
    if hidden_key is not None:
        hk = np.asarray(hidden_key, dtype=np.int64)
        keep = ~((key >= 0) & (key == hk[row]))
        if not keep.all():
            rel, dst, tim, row = rel[keep], dst[keep], tim[keep], row[keep]
            ptr = np.zeros(B + 1, dtype=np.int64)
            np.cumsum(np.bincount(row, minlength=B), out=ptr[1:])
    if mode == "time_adaptive":
        if params is None:
            raise ValueError("time-adaptive sampling needs model parameters")
        scores = kernels.time_scores(query_time[row] - tim, params["w_dt"].data,
                                     params["time.omega"].data, params["time.phi"].data)
    elif mode == "random":
        if rng is None:
            raise ValueError("random sampling needs an rng")
        scores = rng.random(len(row))
    else:
        scores = -np.abs(cur_time[row] - tim).astype(np.float64)
    pick, out_ptr = kernels.segment_topk(ptr, scores, cap)
    n = np.diff(out_ptr)
    A = int(n.max()) + 1 if B else 1
    pos = np.arange(len(pick)) - np.repeat(out_ptr[:-1], n)
    prow = np.repeat(np.arange(B), n)
    out_rel = np.zeros((B, A), dtype=np.int64)
    out_ent = np.zeros((B, A), dtype=np.int64)
    out_time = np.zeros((B, A), dtype=np.int64)
    mask = np.zeros((B, A), dtype=bool)
    loop = np.zeros((B, A), dtype=bool)
    out_rel[prow, pos] = rel[pick]
    out_ent[prow, pos] = dst[pick]
    out_time[prow, pos] = tim[pick]
    mask[prow, pos] = True
    rows = np.arange(B)
    out_rel[rows, n] = SELF_LOOP
    out_ent[rows, n] = cur_ent
    out_time[rows, n] = cur_time
    mask[rows, n] = True
    loop[rows, n] = True
    # padding points at the row's own node so gathers stay in range
    pad = ~mask
    out_ent[pad] = np.broadcast_to(cur_ent[:, None], (B, A))[pad]
    out_time[pad] = np.broadcast_to(cur_time[:, None], (B, A))[pad]
    return CandidateBatch(out_rel, out_ent, out_time, mask, loop)


# ------------------------------------------------------ scoring pieces

def node_repr(params: ModelParams, ent_vecs: Tensor, times, query_time, temporal: bool = True) -> Tensor:
    """``h_e || h(t_q - t)`` for already-gathered entity vectors."""
    dt = np.asarray(query_time) - np.asarray(times)
    return ops.concat([ent_vecs, encode_time_diff(params, dt, temporal)], axis=-1)


def encode_history(params: ModelParams, prev_hidden: Tensor | None, rel_vec: Tensor, node: Tensor) -> Tensor:
    """One GRU step on ``rel || node``; ``prev_hidden=None`` starts from zeros."""
    x = ops.concat([rel_vec, node], axis=-1)
    if prev_hidden is None:
        prev_hidden = Tensor(np.zeros(x.shape))
    return ops.gru_cell(x, prev_hidden, params["gru.w_ih"], params["gru.w_hh"], params["gru.b_ih"], params["gru.b_hh"])


def _rowdot(a: Tensor, b: Tensor) -> Tensor:
    return ops.sum(ops.mul(a, b), axis=-1)


def _bcast(v: Tensor, A: int) -> Tensor:
    """(B, k) -> (B, A, k)."""
    B, k = v.shape
    return ops.expand(ops.reshape(v, (B, 1, k)), 1, A)


def _time_term(params: ModelParams, dt, temporal: bool) -> Tensor:
    """``w_dt . h(dt)`` for every entry of ``dt``."""
    dt = np.asarray(dt)
    if not temporal:
        return Tensor(np.zeros(dt.shape))
    te = encode_time_diff(params, dt)
    w = ops.reshape(params["w_dt"], (1, params.d))
    return ops.reshape(ops.linear(te, w), dt.shape)


def action_scores(params: ModelParams, hidden: Tensor, hbar_q: Tensor, hbar_a: Tensor, cand_time, cur_time,
                  query_time, mask=None, temporal: bool = True, trace: dict | None = None) -> Tensor:
    """History/query attention over each candidate followed by a softmax over candidates.

    ``hidden`` (B, 3d), ``hbar_q`` (B, 2d), ``hbar_a`` (B, A, 2d).
    """
    B, A, _ = hbar_a.shape
    hbar_hist = ops.linear(hidden, params["w1"])
    cand_time = np.asarray(cand_time)
    phi_hist = ops.add(_rowdot(hbar_a, _bcast(hbar_hist, A)),
                       _time_term(params, cand_time - np.asarray(cur_time)[:, None], temporal))
    phi_q = ops.add(_rowdot(hbar_a, _bcast(hbar_q, A)),
                    _time_term(params, cand_time - np.asarray(query_time)[:, None], temporal))
    att = ops.softmax(ops.concat([ops.reshape(phi_hist, (B, A, 1)), ops.reshape(phi_q, (B, A, 1))], axis=2), axis=2)
    if trace is not None:
        trace["attention"] = att.data
    two_d = hbar_a.shape[2]
    feat = ops.add(ops.mul(ops.expand(ops.slice_(att, 0, 1, axis=2), 2, two_d), _bcast(hbar_hist, A)),
                   ops.mul(ops.expand(ops.slice_(att, 1, 2, axis=2), 2, two_d), _bcast(hbar_q, A)))
    logits = _rowdot(hbar_a, ops.linear(feat, params["w4"]))
    return ops.softmax(logits, axis=-1, mask=mask)


def confidence(params: ModelParams, node_src: Tensor, rel_q: Tensor, node_a: Tensor, mask=None) -> Tensor:
    """Softmax over candidates of the three-mode product core x src x r_q x candidate."""
    B, A, w = node_a.shape
    psi = ops.tucker3(params["core"], node_src, rel_q, ops.reshape(node_a, (B * A, w)),
                      rows=np.repeat(np.arange(B), A))
    return ops.softmax(ops.reshape(psi, (B, A)), axis=-1, mask=mask)


def policy(P: Tensor, conf: Tensor, mask=None, use_confidence: bool = True) -> Tensor:
    """``softmax(P * conf)`` over candidates, or ``P`` itself without confidence."""
    if not use_confidence:
        return P
    return ops.softmax(ops.mul(P, conf), axis=-1, mask=mask)


def concept_action_prob(prior_sums, mask=None) -> np.ndarray:
    """Softmax over candidates of each candidate's summed concept prior."""
    x = np.asarray(prior_sums, dtype=np.float64)
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def concept_kl(pi: Tensor, concept_probs, mask=None) -> Tensor:
    """``sum_a pi log(pi / P_c)`` per row, both sides floored at a tiny epsilon."""
    pc = np.asarray(concept_probs, dtype=np.float64)
    log_pc = np.log(np.maximum(pc, LOG_EPS))
    terms = ops.mul(pi, ops.sub(ops.log(pi), Tensor(log_pc)))
    if mask is not None:
        terms = ops.mul(terms, Tensor(np.asarray(mask, dtype=np.float64)))
    return ops.sum(terms, axis=-1)


# ------------------------------------------------------- batched step

@dataclass
class QueryBatch:
    """Aligned arrays describing the queries served by a batch of walkers."""

    source: np.ndarray
    relation: np.ndarray
    time: np.ndarray
    answer: np.ndarray
    hidden_key: np.ndarray

    @classmethod
    def build(cls, queries, graph: ActionGraph | None = None) -> "QueryBatch":
        qs = list(queries)
        src = np.array([q.source for q in qs], dtype=np.int64)
        rel = np.array([q.relation for q in qs], dtype=np.int64)
        tim = np.array([q.query_time for q in qs], dtype=np.int64)
        ans = np.array([q.answer for q in qs], dtype=np.int64)
        keys = np.full(len(qs), -1, dtype=np.int64)
        if graph is not None:
            for i, q in enumerate(qs):
                fact = (q.source, q.relation, q.answer, q.query_time)
                if not Vocab.is_original(q.relation):
                    fact = (q.answer, Vocab.inverse_of(q.relation), q.source, q.query_time)
                keys[i] = graph.fact_key(fact)
        return cls(src, rel, tim, ans, keys)

    def __len__(self) -> int:
        return len(self.source)


@dataclass
class StepOutput:
    cand: CandidateBatch
    P: Tensor
    conf: Tensor
    pi: Tensor
    concept: np.ndarray
    kl: Tensor
    node_a: Tensor = field(repr=False)
    rel_a: Tensor = field(repr=False)


class PolicyNet:
    """Everything a walker needs for one episode: params, entity table, graph and concepts."""

    def __init__(self, params: ModelParams, enc: UnseenEncoding, graph: ActionGraph, queries: QueryBatch,
                 concepts: ConceptTable | None, variant: Variant = Variant(), cap: int = 50):
        self.params = params
        self.enc = enc
        self.graph = graph
        self.q = queries
        self.concepts = concepts
        self.variant = variant
        self.cap = cap

    def entity_vecs(self, ents, qidx) -> Tensor:
        return self.enc.lookup(ents, qidx)

    def node(self, ents, times, qidx) -> Tensor:
        qidx = np.asarray(qidx)
        return node_repr(self.params, self.entity_vecs(ents, qidx), times, self.q.time[qidx], self.variant.temporal)

    def start(self, qidx) -> tuple[Tensor, tuple[Tensor, Tensor, Tensor]]:
        """Initial hidden state plus the per-row query tensors ``(hbar_q, node_src, rel_q)``."""
        qidx = np.asarray(qidx, dtype=np.int64)
        B = len(qidx)
        p = self.params
        node_src = self.node(self.q.source[qidx], self.q.time[qidx], qidx)
        rel_q = ops.take(p["rel"], self.q.relation[qidx])
        hbar_q = ops.linear(ops.concat([rel_q, node_src], axis=-1), p["w2"])
        dummy = ops.expand(ops.reshape(p["rel_dummy"], (1, p.d)), 0, B)
        hidden = encode_history(p, None, dummy, node_src)
        return hidden, (hbar_q, node_src, rel_q)

    def step(self, qidx, cur_ent, cur_time, hidden: Tensor, qstate, rng=None) -> StepOutput:
        qidx = np.asarray(qidx, dtype=np.int64)
        hbar_q, node_src, rel_q = qstate
        p, v = self.params, self.variant
        cand = sample_action_space(self.graph, cur_ent, cur_time, self.q.time[qidx], p, v.sample_mode, self.cap,
                                   rng, self.q.hidden_key[qidx])
        B, A = cand.shape
        qa = np.broadcast_to(qidx[:, None], (B, A))
        node_a = self.node(cand.ent, cand.time, qa)
        rel_a = ops.take(p["rel"], cand.rel)
        hbar_a = ops.linear(ops.concat([rel_a, node_a], axis=-1), p["w3"])
        P = action_scores(p, hidden, hbar_q, hbar_a, cand.time, cur_time, self.q.time[qidx], cand.mask, v.temporal)
        if v.use_confidence:
            conf = confidence(p, node_src, rel_q, node_a, cand.mask)
        else:
            conf = Tensor(np.where(cand.mask, 1.0, 0.0) / cand.counts()[:, None])
        pi = policy(P, conf, cand.mask, v.use_confidence)
        if self.concepts is not None and self.concepts.prior is not None:
            sums = self.concepts.prior_sum(np.broadcast_to(self.q.relation[qidx][:, None], (B, A)), cand.ent)
        else:
            sums = np.zeros((B, A))
        pc = concept_action_prob(sums, cand.mask)
        kl = concept_kl(pi, pc, cand.mask) if v.use_concepts else Tensor(np.zeros(B))
        return StepOutput(cand, P, conf, pi, pc, kl, node_a, rel_a)

    def advance(self, hidden: Tensor, out: StepOutput, choice) -> Tensor:
        """GRU update with the chosen candidate of every row."""
        B = len(choice)
        key = (np.arange(B), np.asarray(choice))
        return encode_history(self.params, hidden, ops.index(out.rel_a, key), ops.index(out.node_a, key))

    def rewards(self, qidx, ents, theta: float) -> np.ndarray:
        qidx = np.asarray(qidx)
        table = self.enc.table.data
        h_ans = table[self.enc.rows(self.q.answer[qidx], qidx)]
        h_act = table[self.enc.rows(ents, qidx)]
        return reward(h_ans, h_act, theta)


def episode_net(params: ModelParams, background: TkgStore, task, concepts: ConceptTable | None, queries,
                variant: Variant = Variant(), cap: int = 50, per_query: bool = False) -> PolicyNet:
    """Encode the task's unseen entities and wire up the action graph for ``queries``."""
    queries = list(queries)
    graph = ActionGraph(background, task.support_facts())
    qb = QueryBatch.build(queries, graph)
    enc = encode_all_unseen(params, task, [(q.source, q.query_time) for q in queries], variant.use_pos, per_query)
    return PolicyNet(params, enc, graph, qb, concepts, variant, cap)


def sample_choices(pi: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row by inverse CDF."""
    p = np.where(mask, pi, 0.0)
    cdf = np.cumsum(p, axis=1)
    u = rng.random(len(p)) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(idx, mask.sum(axis=1) - 1)


# ------------------------------------------------------------- traces

@dataclass
class PathTrace:
    """Start node followed by hops ``(relation, entity, time, p, conf)``."""

    source: int
    query_time: int
    hops: list[tuple[int, int, int, float, float]] = field(default_factory=list)

    def to_text(self, vocab: Vocab, epoch=None) -> str:
        def stamp(t):
            if epoch is None:
                return str(t)
            return (epoch + _dt.timedelta(days=int(t))).isoformat()

        def rname(r):
            return "SELF_LOOP" if r == SELF_LOOP else vocab.relation_name(r)

        lines = []
        prev = (self.source, self.query_time)
        for r, e, t, p, c in self.hops:
            lines.append(f"({vocab.entities[prev[0]]}@{stamp(prev[1])}) -[{rname(r)}, p={p:.4f}, conf={c:.4f}]-> "
                         f"({vocab.entities[e]}@{stamp(t)})")
            prev = (e, t)
        return "\n".join(lines)
