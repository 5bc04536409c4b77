"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are collected in ``RESULTS`` and echoed in the terminal summary
(see ``conftest.pytest_terminal_summary``). Criterion 7 trains three models
and takes several minutes.
"""

import functools
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from fitcarl import cli
from fitcarl.agent import ActionGraph, concept_action_prob, concept_kl, episode_net, reward, sample_action_space, \
    sample_choices, variant_from_ablations
from fitcarl.encoder import encode_entity, encode_time_diff
from fitcarl.evaluate import answer_filters, beam_search, evaluate, metrics_from_ranks, rank_task
from fitcarl.graph import TkgStore, Vocab, compute_concept_prior, concepts_from_sets
from fitcarl.numeric import Tensor, no_grad, ops, rng_stream
from fitcarl.params import init_params
from fitcarl.pretrain import pretrain
from fitcarl.split import derive_queries, load_split, sample_task
from fitcarl.synthetic import generate_synthetic
from fitcarl.train import TrainConfig, episode_loss, initial_params, meta_train

from conftest import analytic, central_diff, max_rel_err
from test_cli import DATASET_STATS
from test_agent import full_sort_top, run_scores, scores_oracle, star_graph, toy_world, tucker_oracle
from test_train_eval import brute_force_ranks, exhaustive, jitter, permute_times, twenty_quad_world, world

RESULTS = {}


def criterion(n, title):
    """Record a PASS/FAIL line for criterion ``n`` around the wrapped test."""
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                if isinstance(exc, pytest.skip.Exception):
                    raise
                RESULTS[n] = f"criterion {n} FAIL  {title}: {type(exc).__name__}: {str(exc).splitlines()[0][:160]}"
                print(RESULTS[n])
                raise
            took = time.perf_counter() - start
            RESULTS[n] = f"criterion {n} PASS  {title} ({took:.1f}s)" + (f": {detail}" if detail else "")
            print(RESULTS[n])
        return run
    return wrap


# ------------------------------------------------------------------ 1

def replay_loss(params, split, task, queries, L, record, theta=1.0, gamma=0.9, eta=0.5):
    """Full training loss along a fixed set of walks.

    The first call samples the walks and stores, per step, the chosen edge of
    every query together with its (constant) reward. Later calls look the same
    edges up again, so finite differences never switch trajectories.
    """
    net = episode_net(params, split.background, task, split.concepts, queries, cap=50)
    Q = len(queries)
    qidx = np.arange(Q)
    hidden, qstate = net.start(qidx)
    cur_e, cur_t = net.q.source.copy(), net.q.time.copy()
    log_pi, kls, rewards = [], [], []
    for step in range(L):
        out = net.step(qidx, cur_e, cur_t, hidden, qstate)
        keys = [list(zip(*row)) for row in zip(out.cand.rel.tolist(), out.cand.ent.tolist(), out.cand.time.tolist())]
        if len(record) <= step:
            pick = sample_choices(out.pi.data, out.cand.mask, rng_stream(1, f"walk{step}"))
            record.append(([keys[q][pick[q]] for q in qidx], net.rewards(qidx, out.cand.ent[qidx, pick], theta)))
        edges, r = record[step]
        choice = np.array([keys[q].index(edges[q]) for q in qidx])
        log_pi.append(ops.log(ops.index(out.pi, (qidx, choice))))
        kls.append(out.kl)
        rewards.append(r)
        if step + 1 < L:
            hidden = net.advance(hidden, out, choice)
        cur_e, cur_t = out.cand.ent[qidx, choice], out.cand.time[qidx, choice]
    return episode_loss(log_pi, kls, rewards, gamma, eta, Q)


@criterion(1, "full-loss gradients match central differences")
def test_criterion_1_gradient_integrity():
    start = time.perf_counter()
    split = generate_synthetic(n_entities=10, n_relations=2, n_timestamps=8, n_concepts=3, n_facts=60,
                               fractions=(0.2, 0.1, 0.1), seed=0)
    assert split.vocab.n_entities == 10
    params = init_params(10, split.vocab.n_relations, d=4, seed=0)
    rng = np.random.default_rng(0)
    for k in params:
        params[k].data += rng.normal(0, 0.2, params[k].shape)
    params["time.omega"].data[:] = rng.uniform(0.05, 1.0, 4)
    task = sample_task(split, "meta_train", 3, rng_stream(0, "task"))
    queries = [q for e in task.entities for q in derive_queries(task, e)]
    record = []
    replay_loss(params, split, task, queries, 2, record)

    def f():
        return replay_loss(params, split, task, queries, 2, record)

    tensors = params.tensors()
    a = analytic(f, tensors)
    n = central_diff(f, tensors, h=1e-5)
    err = max_rel_err(a, n, floor=1e-6)
    took = time.perf_counter() - start
    assert all(np.any(g != 0) for g in a), "some parameter received no gradient"
    assert err < 1e-4, f"max relative error {err:.3e}"
    assert took < 60, f"took {took:.1f}s"
    return f"max rel err {err:.2e} over {sum(t.data.size for t in tensors)} entries"


# ------------------------------------------------------------------ 2

@criterion(2, "closed-form oracles")
def test_criterion_2_equation_oracles():
    rng = np.random.default_rng(2)
    # time encoding hand case
    p = init_params(10, 7, d=2, seed=0)
    p["time.omega"].data[:] = [0.0, np.pi]
    p["time.phi"].data[:] = 0.0
    np.testing.assert_allclose(encode_time_diff(p, 1).data, np.sqrt(0.5) * np.array([1.0, -1.0]), rtol=0, atol=1e-12)
    # three-mode product against a triple loop
    W = rng.normal(size=(6, 3, 6))
    a, b, c = rng.normal(size=6), rng.normal(size=3), rng.normal(size=6)
    got = ops.tucker3(Tensor(W), Tensor(a[None]), Tensor(b[None]), Tensor(c[None])).data.item()
    assert abs(got - tucker_oracle(W, a, b, c)) < 1e-12
    # action scores against a straight-line evaluation
    p = init_params(4, 3, d=4, seed=2)
    p["time.omega"].data[:] = rng.uniform(0.1, 1, 4)
    p["w_dt"].data[:] = rng.normal(size=4)
    for _ in range(5):
        hidden, rq = rng.normal(size=12), rng.normal(size=4)
        node_src = rng.normal(size=8)
        cands = [(rng.normal(size=4), rng.normal(size=8), int(rng.integers(0, 50))) for _ in range(4)]
        got = run_scores(p, hidden, rq, node_src, cands, 11, 30).data[0]
        np.testing.assert_allclose(got, scores_oracle(p, hidden, rq, node_src, cands, 11, 30), rtol=0, atol=1e-10)
    # episode loss against the direct double sum
    Q, L, gamma, eta = 3, 3, 0.9, 0.3
    lp, kl, rw = rng.normal(size=(L, Q)) - 1.0, rng.random((L, Q)), rng.random((L, Q))
    want = sum(gamma ** s * (eta * kl[s, q] - lp[s, q] * rw[s, q]) for q in range(Q) for s in range(L)) / Q
    got = episode_loss([Tensor(x) for x in lp], [Tensor(x) for x in kl], list(rw), gamma, eta, Q).item()
    assert abs(got - want) < 1e-12


# ------------------------------------------------------------------ 3

@criterion(3, "published worked examples")
def test_criterion_3_worked_examples():
    vocab = Vocab()
    s, e1, e2 = (vocab.entity_id(n) for n in ("s", "e1", "e2"))
    r = vocab.relation_id("r")
    store = TkgStore(vocab, [s, s], [r, r], [e1, e2], [0, 1])
    prior = compute_concept_prior(store, concepts_from_sets(vocab.n_entities, ["c1", "c2"], {e1: {0, 1}, e2: {1}}))
    assert prior.prior[r, 0] == 1 / 3 and prior.prior[r, 1] == 2 / 3
    two = concept_action_prob([0.3 + 0.1, 0.6])
    np.testing.assert_allclose(two, [0.450, 0.550], atol=1e-3)
    root = os.environ.get("FITCARL_DATA_DIR")
    found = [name for name in sorted(DATASET_STATS) if root and (Path(root) / name).is_dir()]
    for name in found:
        stats = load_split(Path(root) / name).statistics()
        assert tuple(stats[c] for c in cli.STAT_COLUMNS) == DATASET_STATS[name], name
    return f"dataset rows checked: {', '.join(found) or 'none provided (set FITCARL_DATA_DIR)'}"


# ------------------------------------------------------------------ 4

@criterion(4, "distribution invariants")
def test_criterion_4_distribution_invariants():
    rng = np.random.default_rng(4)
    split, p, task, queries = toy_world(d=4)
    checked = 0
    while checked < 1000:
        jittered = p.copy()
        for k in jittered:
            jittered[k].data += rng.normal(0, 0.3, jittered[k].shape)
        pick = rng.choice(len(queries), size=min(len(queries), 40), replace=False)
        qs = [queries[i] for i in pick]
        net = episode_net(jittered, split.background, task, split.concepts, qs, cap=int(rng.integers(1, 12)))
        qidx = np.arange(len(qs))
        with no_grad():
            hidden, qstate = net.start(qidx)
            ent = np.array([rng.choice(split.vocab.n_entities) for _ in qs])
            tim = rng.integers(0, 20, len(qs))
            out = net.step(qidx, ent, tim, hidden, qstate)
        for dist in (out.pi.data, out.P.data, out.conf.data, out.concept):
            np.testing.assert_allclose(dist.sum(axis=1), 1.0, rtol=0, atol=1e-9)
        assert np.all(out.kl.data >= -1e-12)
        checked += len(qs)
    for _ in range(200):
        n = int(rng.integers(2, 9))
        a, b = concept_action_prob(rng.normal(size=n) * 3), concept_action_prob(rng.normal(size=n) * 3)
        assert concept_kl(Tensor(a), b).item() >= 0
        assert abs(concept_kl(Tensor(a), a).item()) < 1e-12
    h = rng.normal(size=8)
    direction = rng.normal(size=8)
    direction /= np.linalg.norm(direction)
    dists = np.linspace(0, 15, 100)
    r = np.array([reward(h, h + d * direction, theta=5.0) for d in dists])
    assert np.all((r > 0) & (r < 1)) and np.all(np.diff(r) < 0)
    return f"{checked} candidate sets"


# ------------------------------------------------------------------ 5

@criterion(5, "search correctness")
def test_criterion_5_search_correctness():
    rng = np.random.default_rng(5)
    for i in range(200):
        n_edges = int(rng.integers(1, 120))
        times = rng.integers(0, 365, n_edges).tolist()
        store, hub = star_graph(times)
        p = init_params(store.vocab.n_entities, store.vocab.n_relations, d=8, seed=i)
        p["time.omega"].data[:] = rng.uniform(0.001, 0.5, 8)
        p["time.phi"].data[:] = rng.normal(size=8)
        p["w_dt"].data[:] = rng.normal(size=8)
        cap = int(rng.integers(1, 30))
        tq = int(rng.integers(0, 400))
        cand = sample_action_space(ActionGraph(store), [hub], [0], [tq], p, cap=cap)
        got = sorted(c.entity - 1 for c in cand.row(0)[:-1])
        assert got == full_sort_top(p, times, tq, cap), f"store {i}"
    for seed in range(3):
        split, params, task, queries = world(seed=seed)
        net = episode_net(params, split.background, task, split.concepts, queries[:10], cap=5)
        oracle = exhaustive(net, 2)
        res = beam_search(net, 2, 1000)
        for q, (best, count) in enumerate(oracle):
            assert count <= 1000
            want = sorted(best, key=lambda e: (-best[e], e))
            assert res.entities[q].tolist() == want
            np.testing.assert_allclose(res.scores[q], [best[e] for e in want], rtol=0, atol=1e-12)
    split, task, _ = twenty_quad_world()
    cfg = TrainConfig(d=4, L=2, cap=50, beam=1000)
    params = jitter(init_params(split.vocab.n_entities, split.vocab.n_relations, d=4, seed=3), 3)
    ranks = [r["rank"] for r in rank_task(split, params, task, cfg, cfg.beam, answer_filters(split))]
    want = brute_force_ranks(split, params, task, cfg)
    assert ranks == want
    assert metrics_from_ranks(ranks) == metrics_from_ranks(want)


# ------------------------------------------------------------------ 6

@criterion(6, "ablation contracts")
def test_criterion_6_ablations():
    split, p, task, queries = toy_world()
    net = episode_net(p, split.background, task, split.concepts, queries, variant_from_ablations(["B"]), cap=6)
    qidx = np.arange(len(queries))
    hidden, qstate = net.start(qidx)
    out = net.step(qidx, net.q.source, net.q.time, hidden, qstate)
    np.testing.assert_array_equal(out.pi.data, out.P.data)

    # D: the encoder logits reduce to the plain scaled dot product even with non-zero position weights
    rng = np.random.default_rng(6)
    enc = init_params(10, 7, d=4, seed=0)
    for i in range(2):
        enc[f"enc.l{i}.pos"].data[:] = rng.normal(size=enc[f"enc.l{i}.pos"].shape)
    meta = Tensor(rng.normal(size=(3, 4)))
    trace = []
    encode_entity(enc, meta, [3, 8, 1], t_query=10, use_pos=False, trace=trace)
    x = np.vstack([enc["enc.cls"].data, meta.data])
    H, dh = enc.n_heads, 2
    for h in range(H):
        rows = slice(h * dh, (h + 1) * dh)
        q = x @ enc["enc.l0.wq"].data[rows].T
        k = x @ enc["enc.l0.wk"].data[rows].T
        np.testing.assert_allclose(trace[0]["logits"][0, h], q @ k.T / np.sqrt(dh), rtol=0, atol=1e-12)
    with_pos = []
    encode_entity(enc, meta, [3, 8, 1], t_query=10, use_pos=True, trace=with_pos)
    assert not np.allclose(with_pos[0]["logits"], trace[0]["logits"])

    # E: a permutation of every timestamp changes nothing the model computes
    split, params, task, queries = world()
    perm = np.random.default_rng(5).permutation(20)
    s2, t2, q2 = permute_times(split, task, queries, perm)
    cfg = TrainConfig(d=4, L=3, cap=8, ablations=("E",))
    outs = []
    for sp, tk, qs in [(split, task, queries), (s2, t2, q2)]:
        net = episode_net(params, sp.background, tk, sp.concepts, qs, cfg.variant, cfg.cap)
        res = beam_search(net, 3, 8, rng_stream(7, "e"))
        with no_grad():
            h, qst = net.start(np.arange(len(qs)))
            step = net.step(np.arange(len(qs)), net.q.source, net.q.time, h, qst, rng_stream(7, "s"))
        outs.append((res, step, net.enc.table.data))
    (ra, sa, ea), (rb, sb, eb) = outs
    np.testing.assert_array_equal(ea, eb)
    for x_, y_ in [(sa.P, sb.P), (sa.conf, sb.conf), (sa.pi, sb.pi)]:
        np.testing.assert_array_equal(x_.data, y_.data)
    for a, b in zip(ra.scores, rb.scores):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(ra.entities, rb.entities):
        np.testing.assert_array_equal(a, b)


# ------------------------------------------------------------------ 7

DESK = dict(d=32, L=3, cap=20, beam=20, lr=1e-2, eta=0.5, theta=0.0, max_queries=128, episodes=400,
            valid_every=50, pretrain_epochs=50, eval_seeds=(1, 2, 3, 4, 5))


def desk_run(split, ablations=()):
    cfg = TrainConfig(K=1, ablations=tuple(ablations), **DESK)
    emb = pretrain(split.background, d=cfg.d, epochs=cfg.pretrain_epochs, seed=cfg.seed)
    untrained = initial_params(split, cfg, emb)
    base = evaluate(split, untrained, "meta_test", cfg).mrr
    res = meta_train(split, cfg, embedding=emb)
    return base, evaluate(split, res.best.params, "meta_test", cfg).mrr


@pytest.mark.slow
@criterion(7, "end-to-end learning on the synthetic rule graph")
def test_criterion_7_end_to_end_learning():
    start = time.perf_counter()
    split = generate_synthetic(n_entities=200, n_relations=10, n_timestamps=50, n_concepts=20, seed=0)
    n = split.vocab.n_entities
    random_mrr = sum(1 / k for k in range(1, n + 1)) / n
    untrained, full = desk_run(split)
    took = time.perf_counter() - start
    _, no_conf = desk_run(split, ["B"])
    _, no_concept = desk_run(split, ["C"])
    line = (f"full {full:.4f}, untrained {untrained:.4f}, random {random_mrr:.4f}, "
            f"B {no_conf:.4f}, C {no_concept:.4f}, full run {took:.0f}s")
    print(line)
    assert took < 15 * 60, line
    assert full >= 2 * untrained, line
    assert full >= 3 * random_mrr, line
    assert no_conf < full and no_concept < full, line
    return line


# ------------------------------------------------------------------ 8

@criterion(8, "same seed gives identical artifacts")
def test_criterion_8_determinism(tmp_path):
    data = tmp_path / "split"
    assert cli.main(["make-splits", "--synthetic", "--out", str(data), "--seed", "0"]) == 0
    cfg = tmp_path / "fast.cfg"
    cfg.write_text("d = 8\nL = 2\ncap = 8\npretrain_epochs = 2\nvalid_every = 2\nmax_queries = 40\nbeam = 5\n")
    blobs = []
    for i in range(2):
        run, ev = tmp_path / f"run{i}", tmp_path / f"ev{i}"
        assert cli.main(["train", "--data", str(data), "--out", str(run), "--config", str(cfg), "--episodes", "4",
                         "--seed", "11", "--seeds", "1", "--workers", "1"]) == 0
        assert cli.main(["eval", "--data", str(data), "--checkpoint", str(run / "best.ckpt"), "--out", str(ev),
                         "--seeds", "1,2", "--workers", "1"]) == 0
        blobs.append([(run / "best.ckpt").read_bytes(), (run / "final.ckpt").read_bytes(),
                      (ev / "metrics.json").read_bytes()])
    assert blobs[0] == blobs[1]
    assert json.loads(blobs[0][2])["n_queries"] > 0
