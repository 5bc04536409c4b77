import datetime as dt
from collections import Counter

import numpy as np
import pytest

from fitcarl.graph import (
    SELF_LOOP,
    DataError,
    TkgStore,
    Vocab,
    compute_concept_prior,
    concepts_from_sets,
    load_concepts,
    load_quadruples,
)


def write(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def random_store(rng, n_ent=12, n_rel=4, n_facts=50):
    vocab = Vocab()
    for i in range(n_ent):
        vocab.entity_id(f"e{i}")
    for i in range(n_rel):
        vocab.relation_id(f"r{i}")
    s = rng.integers(0, n_ent, n_facts)
    o = rng.integers(0, n_ent, n_facts)
    r = 2 * rng.integers(0, n_rel, n_facts) + 1
    t = rng.integers(0, 30, n_facts)
    return TkgStore(vocab, s, r, o, t)


def test_single_fact_round_trip(tmp_path):
    p = write(tmp_path / "q.txt", ["A\tlikes\tB\t2014-01-05"])
    store = load_quadruples(p, epoch=dt.date(2014, 1, 1))
    v = store.vocab
    A, B, likes = v.entity_id("A"), v.entity_id("B"), v.relation_id("likes")
    assert [tuple(vars(q).values()) for q in store.quads] == [(A, likes, B, 4)]
    assert store.out_edges(A) == [(likes, B, 4)]
    assert store.out_edges(B) == [(Vocab.inverse_of(likes), A, 4)]


def test_default_epoch_is_earliest_date(tmp_path):
    p = write(tmp_path / "q.txt", ["A\tr\tB\t2014-01-05", "B\tr\tC\t2014-01-02"])
    store = load_quadruples(p)
    assert store.t.tolist() == [3, 0]
    assert store.time_span == (0, 3)


def test_integer_timestamps_kept(tmp_path):
    p = write(tmp_path / "q.txt", ["A\tr\tB\t7", "B\tr\tC\t12"])
    assert load_quadruples(p).t.tolist() == [7, 12]


def test_malformed_line_reports_line_number(tmp_path):
    p = write(tmp_path / "q.txt", ["A\tr\tB\t1", "A\tr\tB"])
    with pytest.raises(DataError, match=r"q.txt:2: expected 4"):
        load_quadruples(p)


def test_empty_file_rejected(tmp_path):
    p = write(tmp_path / "q.txt", [])
    with pytest.raises(DataError, match="empty"):
        load_quadruples(p)


def test_frozen_mode_rejects_unknown_names(tmp_path):
    vocab = Vocab()
    vocab.entity_id("A")
    vocab.entity_id("B")
    vocab.relation_id("r")
    p = write(tmp_path / "q.txt", ["A\tr\tZ\t1"])
    with pytest.raises(DataError, match="unknown entity 'Z'"):
        load_quadruples(p, vocab_mode="frozen", vocab=vocab)
    p2 = write(tmp_path / "q2.txt", ["A\tr\tB\t1"])
    assert len(load_quadruples(p2, vocab_mode="frozen", vocab=vocab)) == 1


def test_relation_vocab_inverse_involution():
    v = Vocab()
    ids = [v.relation_id(f"r{i}") for i in range(5)]
    all_ids = ids + [Vocab.inverse_of(r) for r in ids]
    assert len(set(all_ids)) == 10
    assert SELF_LOOP not in all_ids
    assert Vocab.inverse_of(SELF_LOOP) == SELF_LOOP
    for r in all_ids + [SELF_LOOP]:
        assert Vocab.inverse_of(Vocab.inverse_of(r)) == r
    assert v.relation_name(Vocab.inverse_of(ids[2])) == "r2^-1"


def test_edge_index_invariants(rng):
    store = random_store(rng)
    total = sum(len(store.out_edges(e)) for e in range(store.n_nodes))
    assert total == 2 * len(store)
    facts = Counter(zip(store.s.tolist(), store.r.tolist(), store.o.tolist(), store.t.tolist()))
    for e in range(store.n_nodes):
        for r, o, t in store.out_edges(e):
            assert (Vocab.inverse_of(r), e, t) in store.out_edges(o)
            if Vocab.is_original(r):
                assert facts[(e, r, o, t)] > 0
            else:
                assert facts[(o, Vocab.inverse_of(r), e, t)] > 0


def test_edge_lists_preserve_file_order(tmp_path):
    p = write(tmp_path / "q.txt", ["A\tr\tB\t3", "C\tq\tA\t1", "A\tq\tD\t2"])
    store = load_quadruples(p)
    v = store.vocab
    got = [(v.relation_name(r), v.entities[o], t) for r, o, t in store.out_edges(v.entity_id("A"))]
    assert got == [("r", "B", 3), ("q^-1", "C", 1), ("q", "D", 2)]


def test_serialization_deterministic_and_bit_exact(tmp_path):
    lines = ["A\tr\tB\t2014-01-05", "B\tq\tC\t2014-02-01", "C\tr\tA\t2014-01-01"]
    a = load_quadruples(write(tmp_path / "a.txt", lines)).to_bytes()
    b = load_quadruples(write(tmp_path / "b.txt", lines)).to_bytes()
    assert a == b
    assert a.startswith(b"TKGSTORE1")
    back = TkgStore.from_bytes(a)
    assert back.to_bytes() == a
    assert back.epoch == dt.date(2014, 1, 1)


# -------------------------------------------------------------- concepts

def test_concept_file_loading(tmp_path):
    store = load_quadruples(write(tmp_path / "q.txt", ["AirForceCanada\tr\tB\t1"]))
    cpath = write(tmp_path / "c.txt", ["AirForceCanada\tAirForce|Military|Government", "B\tX", "B\tY|X"])
    table = load_concepts(cpath, store)
    v = store.vocab
    assert len(table.concepts_of(v.entity_id("AirForceCanada"))) == 3
    names = {table.names[c] for c in table.concepts_of(v.entity_id("B"))}
    assert names == {"X", "Y"}


def test_concept_file_empty_and_unknown(tmp_path):
    store = load_quadruples(write(tmp_path / "q.txt", ["A\tr\tB\t1"]))
    table = load_concepts(write(tmp_path / "c.txt", []), store)
    assert all(table.concepts_of(e) == set() for e in range(store.vocab.n_entities))
    with pytest.raises(DataError, match="unknown entity 'Nope'"):
        load_concepts(write(tmp_path / "c2.txt", ["Nope\tX"]), store)


def test_concept_prior_example():
    vocab = Vocab()
    e0, e1, e2 = (vocab.entity_id(n) for n in ("s", "e1", "e2"))
    r = vocab.relation_id("r")
    store = TkgStore(vocab, [e0, e0], [r, r], [e1, e2], [0, 1])
    table = concepts_from_sets(vocab.n_entities, ["c1", "c2"], {e1: {0, 1}, e2: {1}})
    prior = compute_concept_prior(store, table)
    assert prior.prior[r, 0] == 1 / 3
    assert prior.prior[r, 1] == 2 / 3


def test_concept_prior_single_object():
    vocab = Vocab()
    a, b = vocab.entity_id("a"), vocab.entity_id("b")
    r = vocab.relation_id("r")
    store = TkgStore(vocab, [a], [r], [b], [0])
    prior = compute_concept_prior(store, concepts_from_sets(2, ["c"], {b: {0}}))
    assert prior.prior[r, 0] == 1.0
    # inverse relation's objects are the subjects, which have no concepts
    assert not prior.has_prior[Vocab.inverse_of(r)]
    assert prior.prior[Vocab.inverse_of(r)].sum() == 0.0


def test_concept_prior_matches_recount(rng):
    store = random_store(rng, n_facts=50)
    n_c = 6
    sets = {e: set(rng.choice(n_c, size=rng.integers(0, 4), replace=False).tolist()) for e in range(12)}
    prior = compute_concept_prior(store, concepts_from_sets(12, [f"c{i}" for i in range(n_c)], sets))
    counts = Counter()
    for s, r, o, t in zip(store.s, store.r, store.o, store.t):
        for c in sets[o]:
            counts[(int(r), c)] += 1
        for c in sets[s]:
            counts[(Vocab.inverse_of(int(r)), c)] += 1
    for rid in range(store.vocab.n_relations):
        total = sum(counts[(rid, c)] for c in range(n_c))
        for c in range(n_c):
            want = counts[(rid, c)] / total if total else 0.0
            assert prior.prior[rid, c] == want
        if total:
            assert abs(prior.prior[rid].sum() - 1.0) < 1e-12
