"""Synthetic temporal KG with a planted concept rule, for desk-scale experiments.

Every entity has a *type* concept (one per relation) and a noise concept. All
objects of relation ``r`` carry type concept ``r``. Entities also belong to
latent communities; a subject's objects come from its own community with
probability ``locality``, so paths through an unseen entity's support neighbour
are informative about its answers.
"""

from __future__ import annotations

import datetime as _dt

import numpy as np

from .graph import TkgStore, Vocab, concepts_from_sets
from .split import OogSplit, make_split


def generate_store(n_entities=200, n_relations=10, n_timestamps=50, n_concepts=20, n_facts=3000,
                   n_communities=4, locality=0.85, seed=0, epoch=_dt.date(2014, 1, 1)):
    """Return ``(store, concept_table)`` for the planted-rule graph."""
    if n_concepts < n_relations:
        raise ValueError("need at least one concept per relation")
    rng = np.random.default_rng(seed)
    vocab = Vocab()
    for i in range(n_entities):
        vocab.entity_id(f"ent{i:04d}")
    rel_ids = np.array([vocab.relation_id(f"rel{j:02d}") for j in range(n_relations)])
    kind = rng.permutation(np.arange(n_entities) % n_relations)
    community = rng.integers(0, n_communities, n_entities)
    extra = n_concepts - n_relations
    noise = n_relations + rng.integers(0, extra, n_entities) if extra else None
    sets = {e: {int(kind[e])} | ({int(noise[e])} if extra else set()) for e in range(n_entities)}

    s = rng.integers(0, n_entities, n_facts)
    rj = rng.integers(0, n_relations, n_facts)
    o = np.empty(n_facts, dtype=np.int64)
    for i in range(n_facts):
        pool = np.flatnonzero(kind == rj[i])
        local = pool[community[pool] == community[s[i]]]
        if len(local) and rng.random() < locality:
            pool = local
        o[i] = rng.choice(pool)
    t = rng.integers(0, n_timestamps, n_facts)
    keep = s != o
    store = TkgStore(vocab, s[keep], rel_ids[rj[keep]], o[keep], t[keep], epoch)
    table = concepts_from_sets(n_entities, [f"concept{k:02d}" for k in range(n_concepts)], sets)
    return store, table


def generate_synthetic(n_entities=200, n_relations=10, n_timestamps=50, n_concepts=20, n_facts=3000,
                       fractions=(0.15, 0.05, 0.05), seed=0, **kw) -> OogSplit:
    store, table = generate_store(n_entities, n_relations, n_timestamps, n_concepts, n_facts, seed=seed, **kw)
    return make_split(store, fractions=fractions, seed=seed, concepts=table)
