"""Beam-search inference, filtered ranking metrics and path explanations."""

from __future__ import annotations

import csv
import datetime as _dt
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .agent import PathTrace, encode_history, episode_net
from .numeric import no_grad, ops, rng_stream
from .split import OogSplit, derive_queries, sample_task

NEG_INF = -np.inf


@dataclass
class BeamResult:
    """Per query: ranked entities, their scores and the best trajectory's trace."""

    entities: list[np.ndarray]
    scores: list[np.ndarray]
    traces: list[PathTrace]


def beam_search(net, L: int, beam_width: int, rng: np.random.Generator | None = None,
                endpoint_agg: str = "max") -> BeamResult:
    """Keep the ``beam_width`` best partial paths per query by cumulative log-policy.

    An entity's score is the best (or, with ``endpoint_agg="sum"``, the
    log-sum-exp) cumulative log-probability among paths ending there. Entities
    are sorted by score, ties by id.
    """
    if beam_width < 1:
        raise ValueError("beam width must be >= 1")
    Q = len(net.q)
    p = net.params
    with no_grad():
        qidx = np.arange(Q)
        hidden, (hb_q, node_src, rel_q) = net.start(qidx)
        row_q = qidx.copy()
        cum = np.zeros(Q)
        cur_e, cur_t = net.q.source.copy(), net.q.time.copy()
        history = []  # per step: parent row, rel, ent, time, pi, conf
        for step in range(L):
            qstate = (ops.take(hb_q, row_q), ops.take(node_src, row_q), ops.take(rel_q, row_q))
            out = net.step(row_q, cur_e, cur_t, hidden, qstate, rng)
            pi = out.pi.data
            A = pi.shape[1]
            with np.errstate(divide="ignore"):
                total = np.where(out.cand.mask, cum[:, None] + np.log(pi), NEG_INF)
            total = np.where(np.isnan(total), NEG_INF, total)
            # rows are grouped by query, so each query's candidates are one segment
            counts = np.bincount(row_q, minlength=Q) * A
            seg = np.zeros(Q + 1, dtype=np.int64)
            np.cumsum(counts, out=seg[1:])
            pick, _ = kernels.segment_topk(seg, total.reshape(-1), beam_width)
            pick = pick[np.isfinite(total.reshape(-1)[pick])]
            parent, a = pick // A, pick % A
            history.append((parent, out.cand.rel[parent, a], out.cand.ent[parent, a], out.cand.time[parent, a],
                            pi[parent, a], out.conf.data[parent, a]))
            if step + 1 < L:
                hidden = encode_history(p, ops.take(hidden, parent), ops.index(out.rel_a, (parent, a)),
                                        ops.index(out.node_a, (parent, a)))
            cum = total[parent, a]
            row_q = row_q[parent]
            cur_e, cur_t = out.cand.ent[parent, a], out.cand.time[parent, a]
    entities, scores, traces = [], [], []
    for q in range(Q):
        rows = np.flatnonzero(row_q == q)
        ents = cur_e[rows]
        vals = cum[rows]
        uniq = np.unique(ents)
        if endpoint_agg == "max":
            agg = np.array([vals[ents == e].max() for e in uniq])
        else:
            agg = np.array([np.logaddexp.reduce(vals[ents == e]) for e in uniq])
        order = np.lexsort((uniq, -agg))
        entities.append(uniq[order])
        scores.append(agg[order])
        traces.append(_trace(history, rows[np.argmax(vals)] if len(rows) else None, net.q.source[q], net.q.time[q]))
    return BeamResult(entities, scores, traces)


def _trace(history, row, source, query_time) -> PathTrace:
    trace = PathTrace(int(source), int(query_time))
    if row is None:
        return trace
    hops = []
    for parent, rel, ent, tim, pi, conf in reversed(history):
        hops.append((int(rel[row]), int(ent[row]), int(tim[row]), float(pi[row]), float(conf[row])))
        row = parent[row]
    trace.hops = hops[::-1]
    return trace


# --------------------------------------------------------------- metrics

def filtered_rank(ranked: np.ndarray, answer: int, known: set) -> int | None:
    """1-based rank of ``answer`` after dropping other known true answers; None if absent."""
    pos = 0
    for e in ranked.tolist():
        if e == answer:
            return pos + 1
        if e not in known:
            pos += 1
    return None


def metrics_from_ranks(ranks) -> dict[str, float]:
    rr = np.array([0.0 if r is None else 1.0 / r for r in ranks])
    hit = lambda k: float(np.mean([r is not None and r <= k for r in ranks])) if len(ranks) else 0.0  # noqa: E731
    return {"mrr": float(rr.mean()) if len(rr) else 0.0, "hits1": hit(1), "hits3": hit(3), "hits10": hit(10)}


@dataclass
class EvalReport:
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    per_seed: dict[str, list[float]]
    records: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        body = {"mrr": self.mrr, "hits1": self.hits1, "hits3": self.hits3, "hits10": self.hits10,
                "per_seed": self.per_seed, "n_queries": len(self.records)}
        return json.dumps(body, indent=2, sort_keys=True)


def answer_filters(split: OogSplit) -> dict[tuple[int, int, int], set[int]]:
    """``(source, relation, time) -> objects`` over every known fact, both directions."""
    out: dict[tuple[int, int, int], set[int]] = {}
    for s, r, o, t in split.all_fact_keys():
        out.setdefault((s, r, t), set()).add(o)
    return out


def _chunks(n: int, size: int):
    return [np.arange(i, min(i + size, n)) for i in range(0, n, size)]


def rank_task(split: OogSplit, params, task, cfg, beam: int, filters: dict | None = None, workers: int = 1,
              seed: int = 0, max_rows: int = 200_000) -> list[dict]:
    """Beam-search every query of ``task``; one record per query with its filtered rank (None if missed)."""
    filters = {} if filters is None else filters
    variant = cfg.variant
    queries = [q for e in task.entities for q in derive_queries(task, e)]
    size = max(1, max_rows // max(1, beam * (cfg.cap + 1)))
    chunks = _chunks(len(queries), size)

    def run(ci):
        qs = [queries[i] for i in chunks[ci]]
        with no_grad():
            net = episode_net(params, split.background, task, split.concepts, qs, variant, cfg.cap, cfg.per_query_cls)
        rng = rng_stream(seed, f"eval/{task.which}/chunk{ci}") if variant.sample_mode == "random" else None
        return beam_search(net, cfg.L, beam, rng, cfg.endpoint_agg)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(len(chunks))))
    else:
        results = [run(ci) for ci in range(len(chunks))]
    records = []
    for idx, res in zip(chunks, results):
        for j, qi in enumerate(idx):
            q = queries[qi]
            known = filters.get((q.source, q.relation, q.query_time), set()) - {q.answer}
            records.append({"seed": seed, "source": q.source, "relation": q.relation, "time": q.query_time,
                            "answer": q.answer, "rank": filtered_rank(res.entities[j], q.answer, known),
                            "trace": res.traces[j]})
    return records


def evaluate(split: OogSplit, params, which: str, cfg, seeds=None, beam: int | None = None, filtered: bool = True,
             workers: int | None = None) -> EvalReport:
    """Filtered MRR / Hits@k of ``which`` averaged over one support sample per seed."""
    seeds = tuple(cfg.eval_seeds if seeds is None else seeds)
    beam = cfg.beam if beam is None else beam
    workers = cfg.workers if workers is None else workers
    filters = answer_filters(split) if filtered else {}
    per_seed = {"mrr": [], "hits1": [], "hits3": [], "hits10": []}
    records: list[dict] = []
    for seed in seeds:
        task = sample_task(split, which, cfg.K, rng_stream(seed, f"eval/{which}"))
        recs = rank_task(split, params, task, cfg, beam, filters, workers, seed)
        m = metrics_from_ranks([r["rank"] for r in recs])
        for k in per_seed:
            per_seed[k].append(m[k])
        records.extend(recs)
    mean = {k: float(np.mean(v)) if v else 0.0 for k, v in per_seed.items()}
    return EvalReport(mean["mrr"], mean["hits1"], mean["hits3"], mean["hits10"], per_seed, records)


def bucket_by_time(report: EvalReport, granularity: str = "month", epoch: _dt.date | None = None):
    """Rows ``(bucket, mrr, count)`` grouping queries by the calendar bucket of their time."""
    if granularity not in ("month", "year"):
        raise ValueError("granularity must be 'month' or 'year'")
    groups: dict[str, list] = {}
    for rec in report.records:
        t = rec["time"]
        if epoch is None:
            key = str(t)
        else:
            day = epoch + _dt.timedelta(days=int(t))
            key = f"{day.year:04d}-{day.month:02d}" if granularity == "month" else f"{day.year:04d}"
        groups.setdefault(key, []).append(rec["rank"])
    return [(k, metrics_from_ranks(v)["mrr"], len(v)) for k, v in sorted(groups.items())]


def buckets_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bucket", "mrr", "count"])
    for b, mrr, n in rows:
        w.writerow([b, repr(mrr), n])
    return buf.getvalue()


def explain(split: OogSplit, params, cfg, query, task) -> PathTrace:
    """Greedy (beam width 1) walk for one query with per-hop policy and confidence."""
    with no_grad():
        net = episode_net(params, split.background, task, split.concepts, [query], cfg.variant, cfg.cap,
                          cfg.per_query_cls)
    rng = rng_stream(cfg.seed, "explain") if cfg.variant.sample_mode == "random" else None
    return beam_search(net, cfg.L, 1, rng).traces[0]
