"""Out-of-graph splits and episodic support/query tasks."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .graph import (
    ConceptTable,
    DataError,
    TkgStore,
    Vocab,
    build_store,
    compute_concept_prior,
    empty_concepts,
    load_concepts,
    read_quadruple_rows,
    time_epoch,
    write_concepts,
    write_quadruples,
)

log = logging.getLogger(__name__)

META_SETS = ("meta_train", "meta_valid", "meta_test")
SPLIT_FILES = {"background": "background.txt", **{m: f"{m}.txt" for m in META_SETS}}
CONCEPT_FILE = "concepts.txt"

Fact = tuple[int, int, int, int]


class LpQuery(NamedTuple):
    source: int
    relation: int
    query_time: int
    answer: int


@dataclass
class OogSplit:
    vocab: Vocab
    background: TkgStore
    unseen_sets: dict[str, np.ndarray]
    fact_sets: dict[str, TkgStore]
    concepts: ConceptTable

    def unseen_all(self) -> np.ndarray:
        return np.concatenate([self.unseen_sets[m] for m in META_SETS])

    def entity_facts(self, which: str) -> dict[int, list[Fact]]:
        """Facts of every unseen entity of ``which``, in file order."""
        store = self.fact_sets[which]
        members = set(self.unseen_sets[which].tolist())
        out: dict[int, list[Fact]] = {int(e): [] for e in self.unseen_sets[which]}
        for fact in zip(store.s.tolist(), store.r.tolist(), store.o.tolist(), store.t.tolist()):
            s, _, o, _ = fact
            if s in members:
                out[s].append(fact)
            if o in members and o != s:
                out[o].append(fact)
        return out

    def statistics(self) -> dict[str, int]:
        times = np.concatenate([self.background.t] + [self.fact_sets[m].t for m in META_SETS])
        return {
            "entities": self.vocab.n_entities,
            "relations": len(self.vocab.relations),
            "timestamps": int(len(np.unique(times))),
            "meta_train_entities": len(self.unseen_sets["meta_train"]),
            "meta_valid_entities": len(self.unseen_sets["meta_valid"]),
            "meta_test_entities": len(self.unseen_sets["meta_test"]),
            "background_facts": len(self.background),
            "meta_train_facts": len(self.fact_sets["meta_train"]),
            "meta_valid_facts": len(self.fact_sets["meta_valid"]),
            "meta_test_facts": len(self.fact_sets["meta_test"]),
        }

    def all_fact_keys(self) -> set[Fact]:
        keys = self.background.fact_keys()
        for m in META_SETS:
            keys |= self.fact_sets[m].fact_keys()
        return keys

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_quadruples(d / SPLIT_FILES["background"], self.background)
        for m in META_SETS:
            write_quadruples(d / SPLIT_FILES[m], self.fact_sets[m])
        write_concepts(d / CONCEPT_FILE, self.vocab, self.concepts)


def _fmt(vocab: Vocab, fact) -> str:
    s, r, o, t = (int(x) for x in fact)
    return f"({vocab.entities[s]}, {vocab.relation_name(r)}, {vocab.entities[o]}, {t})"


def validate_split(split: OogSplit) -> None:
    """Raise :class:`DataError` naming the first quadruple that breaks an OOG invariant."""
    v = split.vocab
    owner = {}
    for m in META_SETS:
        for e in split.unseen_sets[m].tolist():
            if e in owner:
                raise DataError(f"entity {v.entities[e]!r} is unseen in both {owner[e]} and {m}")
            owner[e] = m
    bg = split.background
    for fact in zip(bg.s, bg.r, bg.o, bg.t):
        if int(fact[0]) in owner or int(fact[2]) in owner:
            raise DataError(f"background quadruple {_fmt(v, fact)} contains an unseen entity")
    for m in META_SETS:
        st = split.fact_sets[m]
        for fact in zip(st.s, st.r, st.o, st.t):
            sides = {owner.get(int(fact[0])), owner.get(int(fact[2]))} - {None}
            if not sides:
                raise DataError(f"{m} quadruple {_fmt(v, fact)} has no unseen entity")
            if sides != {m}:
                raise DataError(f"{m} quadruple {_fmt(v, fact)} links meta sets {sorted(sides)}")


def load_split(directory=None, paths: dict | None = None) -> OogSplit:
    """Load ``background.txt``, ``meta_{train,valid,test}.txt`` and ``concepts.txt``."""
    if paths is None:
        d = Path(directory)
        paths = {k: d / f for k, f in SPLIT_FILES.items()}
        paths["concepts"] = d / CONCEPT_FILE
    rows = {k: read_quadruple_rows(paths[k]) for k in SPLIT_FILES}
    epoch = time_epoch(rows.values())
    vocab = Vocab()
    background = build_store(rows["background"], vocab, epoch, where="background: ")
    bg_entities = set(background.entities().tolist())
    fact_sets = {}
    unseen = {}
    for m in META_SETS:
        # register names first so each set's unseen entities are known
        fact_sets[m] = build_store(rows[m], vocab, epoch, where=f"{m}: ")
    # an unseen entity belongs to the meta set holding most of its facts; any
    # fact that then links two sets is reported by validate_split
    tally: dict[int, list[int]] = {}
    for i, m in enumerate(META_SETS):
        st = fact_sets[m]
        for e in np.stack([st.s, st.o], 1).ravel().tolist():
            if e not in bg_entities:
                tally.setdefault(e, [0, 0, 0])[i] += 1
    for i, m in enumerate(META_SETS):
        unseen[m] = np.array([e for e, c in tally.items() if int(np.argmax(c)) == i], dtype=np.int64)
    # rebuild with the final vocabulary size so every index covers all entities
    background = TkgStore(vocab, background.s, background.r, background.o, background.t, epoch)
    for m in META_SETS:
        st = fact_sets[m]
        fact_sets[m] = TkgStore(vocab, st.s, st.r, st.o, st.t, epoch)
    concept_path = paths.get("concepts")
    table = load_concepts(concept_path, vocab) if concept_path and Path(concept_path).exists() else empty_concepts(vocab)
    split = OogSplit(vocab, background, unseen, fact_sets, compute_concept_prior(background, table))
    validate_split(split)
    return split


def make_split(store: TkgStore, fractions=(0.1, 0.05, 0.05), seed: int = 0,
               concepts: ConceptTable | None = None) -> OogSplit:
    """Randomly pick unseen entities and build a validated OOG split.

    Facts linking two different meta sets are dropped.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr <= 0) or fr.sum() >= 1:
        raise ValueError(f"fractions must be three positive numbers summing below 1, got {tuple(fractions)}")
    ents = store.entities()
    counts = np.floor(fr * len(ents)).astype(int)
    if np.any(counts == 0):
        raise ValueError(f"store with {len(ents)} entities is too small for fractions {tuple(fractions)}")
    rng = np.random.default_rng(seed)
    picked = rng.permutation(ents)
    cuts = np.cumsum(counts)
    unseen = {
        "meta_train": np.sort(picked[:cuts[0]]),
        "meta_valid": np.sort(picked[cuts[0]:cuts[1]]),
        "meta_test": np.sort(picked[cuts[1]:cuts[2]]),
    }
    label = np.full(store.vocab.n_entities, -1)
    for i, m in enumerate(META_SETS):
        label[unseen[m]] = i
    ls, lo = label[store.s], label[store.o]
    background = store.subset((ls < 0) & (lo < 0))
    fact_sets = {}
    for i, m in enumerate(META_SETS):
        touches = (ls == i) | (lo == i)
        clean = ((ls == i) | (ls < 0)) & ((lo == i) | (lo < 0))
        fact_sets[m] = store.subset(touches & clean)
    table = concepts if concepts is not None else empty_concepts(store.vocab)
    split = OogSplit(store.vocab, background, unseen, fact_sets, compute_concept_prior(background, table))
    validate_split(split)
    return split


# ------------------------------------------------------------------ tasks

@dataclass
class EpisodeTask:
    which: str
    K: int
    entities: list[int]
    support: dict[int, list[Fact]]
    query: dict[int, list[Fact]]

    def support_facts(self) -> list[Fact]:
        return [f for e in self.entities for f in self.support[e]]

    def n_queries(self) -> int:
        return sum(len(self.query[e]) for e in self.entities)


def sample_task(split: OogSplit, which: str, K: int, rng: np.random.Generator) -> EpisodeTask:
    """Sample K support facts per unseen entity of ``which``; the rest are queries.

    Entities with at most K facts are skipped.
    """
    if K <= 0:
        raise ValueError(f"K must be positive, got {K}")
    if which not in META_SETS:
        raise ValueError(f"unknown meta set {which!r}")
    facts = split.entity_facts(which)
    entities, support, query = [], {}, {}
    skipped = 0
    for e in sorted(facts):
        fs = facts[e]
        if len(fs) <= K:
            skipped += 1
            continue
        pick = rng.choice(len(fs), size=K, replace=False)
        chosen = set(pick.tolist())
        entities.append(e)
        support[e] = [fs[i] for i in pick]
        query[e] = [f for i, f in enumerate(fs) if i not in chosen]
    if skipped:
        log.warning("%s: skipped %d entities with <= %d facts", which, skipped, K)
    return EpisodeTask(which, K, entities, support, query)


def derive_queries(task: EpisodeTask, e: int) -> list[LpQuery]:
    """Rewrite each query fact of ``e`` as object prediction starting from ``e``."""
    if e not in task.query:
        raise KeyError(f"entity {e} is not part of the task")
    out = []
    for s, r, o, t in task.query[e]:
        if s == e:
            out.append(LpQuery(e, r, t, o))
        else:
            out.append(LpQuery(e, Vocab.inverse_of(r), t, s))
    return out
