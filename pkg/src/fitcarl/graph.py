"""Temporal KG storage: vocabularies, quadruple files, edge index, entity concepts."""

from __future__ import annotations

import datetime as _dt
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import binio, kernels

log = logging.getLogger(__name__)

SELF_LOOP = 0
STORE_MAGIC = b"TKGSTORE1"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


# ------------------------------------------------------------------ vocab

class Vocab:
    """Entity and relation vocabularies shared by every store of one dataset.

    Relation ids interleave originals and inverses: original ``k`` is ``2k+1``,
    its inverse ``2k+2``; id 0 is the self-loop, its own inverse. This keeps ids
    stable while the vocabulary grows.
    """

    def __init__(self):
        self.entities: list[str] = []
        self._ent: dict[str, int] = {}
        self.relations: list[str] = []  # original relation names
        self._rel: dict[str, int] = {}

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        """Number of relation ids including inverses and the self-loop."""
        return 1 + 2 * len(self.relations)

    def entity_id(self, name: str, frozen: bool = False) -> int:
        i = self._ent.get(name)
        if i is None:
            if frozen:
                raise DataError(f"unknown entity {name!r}")
            i = len(self.entities)
            self.entities.append(name)
            self._ent[name] = i
        return i

    def relation_id(self, name: str, frozen: bool = False) -> int:
        k = self._rel.get(name)
        if k is None:
            if frozen:
                raise DataError(f"unknown relation {name!r}")
            k = len(self.relations)
            self.relations.append(name)
            self._rel[name] = k
        return 2 * k + 1

    def has_entity(self, name: str) -> bool:
        return name in self._ent

    def relation_name(self, rid: int) -> str:
        if rid == SELF_LOOP:
            return "SELF_LOOP"
        base = self.relations[(rid - 1) // 2]
        return base if rid % 2 == 1 else f"{base}^-1"

    @staticmethod
    def inverse_of(rid):
        """Inverse relation id; works elementwise on arrays."""
        r = np.asarray(rid)
        inv = np.where(r == SELF_LOOP, SELF_LOOP, np.where(r % 2 == 1, r + 1, r - 1))
        return int(inv) if inv.ndim == 0 else inv

    @staticmethod
    def is_original(rid) -> bool:
        return rid != SELF_LOOP and rid % 2 == 1


# ---------------------------------------------------------------- parsing

def _parse_time(tok: str):
    tok = tok.strip()
    try:
        return int(tok)
    except ValueError:
        pass
    try:
        return _dt.date.fromisoformat(tok)
    except ValueError:
        return None


def read_quadruple_rows(path) -> list[tuple[str, str, str, object]]:
    """Parse a tab-separated quadruple file into raw (s, r, o, time) rows."""
    path = Path(path)
    rows = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 tab-separated columns, got {len(parts)}")
            s, r, o, t = parts
            tv = _parse_time(t)
            if tv is None or (isinstance(tv, int) and tv < 0):
                raise DataError(f"{path}:{lineno}: bad timestamp {t!r}")
            rows.append((s.strip(), r.strip(), o.strip(), tv))
    if not rows:
        raise DataError(f"{path}: empty quadruple file")
    return rows


def time_epoch(row_sets: Iterable[Sequence[tuple]]) -> _dt.date | None:
    """Earliest calendar date across row sets; None when all timestamps are integers."""
    dates = [r[3] for rows in row_sets for r in rows if isinstance(r[3], _dt.date)]
    ints = any(isinstance(r[3], int) for rows in row_sets for r in rows)
    if dates and ints:
        raise DataError("files mix calendar dates and integer timestamps")
    return min(dates) if dates else None


def _to_index(tv, epoch: _dt.date | None) -> int:
    if isinstance(tv, _dt.date):
        if epoch is None:
            raise DataError("calendar dates need an epoch")
        return (tv - epoch).days
    return int(tv)


# ------------------------------------------------------------------ store

@dataclass(frozen=True, eq=False)
class Quadruple:
    subject: int
    relation: int
    object: int
    timestamp: int


class TkgStore:
    """Quadruples plus a CSR index of outgoing edges in both directions.

    For every stored fact ``(s, r, o, t)`` the index holds ``(r, o, t)`` under
    ``s`` and ``(r^-1, s, t)`` under ``o``, in file order.
    """

    def __init__(self, vocab: Vocab, s, r, o, t, epoch: _dt.date | None = None):
        self.vocab = vocab
        self.s = np.asarray(s, dtype=np.int64)
        self.r = np.asarray(r, dtype=np.int64)
        self.o = np.asarray(o, dtype=np.int64)
        self.t = np.asarray(t, dtype=np.int64)
        self.epoch = epoch
        if not (len(self.s) == len(self.r) == len(self.o) == len(self.t)):
            raise DataError("quadruple columns differ in length")
        if len(self.t) and self.t.min() < 0:
            raise DataError("timestamps must be >= 0")
        self._build_index()

    def _build_index(self) -> None:
        n = len(self.s)
        src = np.empty(2 * n, dtype=np.int64)
        src[0::2], src[1::2] = self.s, self.o
        rel = np.empty(2 * n, dtype=np.int64)
        rel[0::2], rel[1::2] = self.r, Vocab.inverse_of(self.r) if n else self.r
        dst = np.empty(2 * n, dtype=np.int64)
        dst[0::2], dst[1::2] = self.o, self.s
        tim = np.repeat(self.t, 2)
        order = np.argsort(src, kind="stable")
        self.n_nodes = self.vocab.n_entities
        counts = np.bincount(src, minlength=self.n_nodes) if n else np.zeros(self.n_nodes, dtype=np.int64)
        self.indptr = np.zeros(self.n_nodes + 1, dtype=np.int64)
        np.cumsum(counts, out=self.indptr[1:])
        self.edge_src = src[order]
        self.edge_rel = rel[order]
        self.edge_dst = dst[order]
        self.edge_time = tim[order]
        self.edge_fact = (np.arange(2 * n) // 2)[order]

    # -- queries
    def __len__(self) -> int:
        return len(self.s)

    @property
    def quads(self) -> list[Quadruple]:
        return [Quadruple(*map(int, q)) for q in zip(self.s, self.r, self.o, self.t)]

    @property
    def time_span(self) -> tuple[int, int]:
        if not len(self.t):
            return (0, 0)
        return int(self.t.min()), int(self.t.max())

    def out_edges(self, e: int) -> list[tuple[int, int, int]]:
        if e >= self.n_nodes:
            return []
        lo, hi = self.indptr[e], self.indptr[e + 1]
        return list(zip(self.edge_rel[lo:hi].tolist(), self.edge_dst[lo:hi].tolist(), self.edge_time[lo:hi].tolist()))

    def entities(self) -> np.ndarray:
        return np.unique(np.concatenate([self.s, self.o]))

    def fact_keys(self) -> set[tuple[int, int, int, int]]:
        """All (s, r, o, t) in both directions, for filtered ranking."""
        inv = Vocab.inverse_of(self.r) if len(self.r) else self.r
        fwd = zip(self.s.tolist(), self.r.tolist(), self.o.tolist(), self.t.tolist())
        bwd = zip(self.o.tolist(), np.asarray(inv).tolist(), self.s.tolist(), self.t.tolist())
        return set(fwd) | set(bwd)

    def subset(self, mask) -> "TkgStore":
        mask = np.asarray(mask, dtype=bool)
        return TkgStore(self.vocab, self.s[mask], self.r[mask], self.o[mask], self.t[mask], self.epoch)

    # -- serialization
    def to_bytes(self) -> bytes:
        header = {
            "version": 1,
            "entities": self.vocab.entities,
            "relations": self.vocab.relations,
            "epoch": self.epoch.isoformat() if self.epoch else None,
        }
        return binio.dumps(STORE_MAGIC, header, {"s": self.s, "r": self.r, "o": self.o, "t": self.t})

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, payload: bytes) -> "TkgStore":
        meta, arr = binio.loads(STORE_MAGIC, payload)
        vocab = Vocab()
        for name in meta["entities"]:
            vocab.entity_id(name)
        for name in meta["relations"]:
            vocab.relation_id(name)
        epoch = _dt.date.fromisoformat(meta["epoch"]) if meta["epoch"] else None
        return cls(vocab, arr["s"], arr["r"], arr["o"], arr["t"], epoch)

    @classmethod
    def load(cls, path) -> "TkgStore":
        return cls.from_bytes(Path(path).read_bytes())


def build_store(rows, vocab: Vocab, epoch, frozen: bool = False, where: str = "") -> TkgStore:
    n = len(rows)
    s = np.empty(n, dtype=np.int64)
    r = np.empty(n, dtype=np.int64)
    o = np.empty(n, dtype=np.int64)
    t = np.empty(n, dtype=np.int64)
    for i, (sn, rn, on, tv) in enumerate(rows):
        try:
            s[i] = vocab.entity_id(sn, frozen)
            r[i] = vocab.relation_id(rn, frozen)
            o[i] = vocab.entity_id(on, frozen)
        except DataError as exc:
            raise DataError(f"{where}row {i + 1}: {exc}") from None
        t[i] = _to_index(tv, epoch)
    if n and t.min() < 0:
        raise DataError(f"{where}timestamp precedes the epoch {epoch}")
    return TkgStore(vocab, s, r, o, t, epoch)


def load_quadruples(path, vocab_mode: str = "build", vocab: Vocab | None = None, epoch=None) -> TkgStore:
    """Load one quadruple file.

    ``vocab_mode="frozen"`` rejects names missing from ``vocab``. Dates become
    day offsets from ``epoch`` (default: the earliest date in the file).
    """
    if vocab_mode not in ("build", "frozen"):
        raise ValueError(f"vocab_mode must be 'build' or 'frozen', got {vocab_mode!r}")
    rows = read_quadruple_rows(path)
    if vocab is None:
        if vocab_mode == "frozen":
            raise ValueError("frozen mode needs an existing vocab")
        vocab = Vocab()
    if epoch is None:
        epoch = time_epoch([rows])
    elif isinstance(epoch, str):
        epoch = _dt.date.fromisoformat(epoch)
    return build_store(rows, vocab, epoch, frozen=vocab_mode == "frozen", where=f"{path}: ")


def write_quadruples(path, store: TkgStore) -> None:
    v = store.vocab
    with open(path, "w", encoding="utf-8") as fh:
        for s, r, o, t in zip(store.s, store.r, store.o, store.t):
            tv = (store.epoch + _dt.timedelta(days=int(t))).isoformat() if store.epoch else str(int(t))
            fh.write(f"{v.entities[s]}\t{v.relations[(r - 1) // 2]}\t{v.entities[o]}\t{tv}\n")


# --------------------------------------------------------------- concepts

@dataclass
class ConceptTable:
    """Entity concepts (CSR) and the relation-conditioned prior P(c | r)."""

    names: list[str]
    ent_ptr: np.ndarray
    ent_concepts: np.ndarray
    prior: np.ndarray | None = None  # (n_relation_ids, n_concepts)
    has_prior: np.ndarray | None = None
    _membership: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_concepts(self) -> int:
        return len(self.names)

    def concepts_of(self, e: int) -> set[int]:
        if e + 1 >= len(self.ent_ptr):
            return set()
        return set(self.ent_concepts[self.ent_ptr[e]:self.ent_ptr[e + 1]].tolist())

    def membership(self) -> np.ndarray:
        if self._membership is None:
            n_ent = len(self.ent_ptr) - 1
            m = np.zeros((n_ent, self.n_concepts))
            rows = np.repeat(np.arange(n_ent), np.diff(self.ent_ptr))
            m[rows, self.ent_concepts] = 1.0
            self._membership = m
        return self._membership

    def prior_sum(self, rel, ent) -> np.ndarray:
        """``sum_{c in C_e} P(c | r)`` elementwise over aligned ``rel``/``ent`` arrays."""
        if self.prior is None:
            raise ValueError("concept prior not computed")
        rel = np.asarray(rel, dtype=np.int64)
        ent = np.asarray(ent, dtype=np.int64)
        m = self.membership()
        return np.einsum("...c,...c->...", self.prior[rel], m[ent])


def empty_concepts(vocab: Vocab) -> ConceptTable:
    return ConceptTable([], np.zeros(vocab.n_entities + 1, dtype=np.int64), np.zeros(0, dtype=np.int64))


def load_concepts(path, store_or_vocab) -> ConceptTable:
    """Read ``entity<TAB>c1|c2|...`` lines. Repeated entities union their sets."""
    vocab = store_or_vocab.vocab if isinstance(store_or_vocab, TkgStore) else store_or_vocab
    names: list[str] = []
    index: dict[str, int] = {}
    sets: dict[int, set[int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            ent, _, rest = line.partition("\t")
            ent = ent.strip()
            if not vocab.has_entity(ent):
                raise DataError(f"{path}:{lineno}: unknown entity {ent!r}")
            eid = vocab.entity_id(ent, frozen=True)
            bucket = sets.setdefault(eid, set())
            for c in rest.split("|"):
                c = c.strip()
                if not c:
                    continue
                if c not in index:
                    index[c] = len(names)
                    names.append(c)
                bucket.add(index[c])
    return concepts_from_sets(vocab.n_entities, names, sets)


def concepts_from_sets(n_entities: int, names: list[str], sets: dict[int, set[int]]) -> ConceptTable:
    ptr = np.zeros(n_entities + 1, dtype=np.int64)
    for e in range(n_entities):
        ptr[e + 1] = ptr[e] + len(sets.get(e, ()))
    flat = np.array([c for e in range(n_entities) for c in sorted(sets.get(e, ()))], dtype=np.int64)
    return ConceptTable(list(names), ptr, flat)


def write_concepts(path, vocab: Vocab, table: ConceptTable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in range(len(table.ent_ptr) - 1):
            cs = table.ent_concepts[table.ent_ptr[e]:table.ent_ptr[e + 1]]
            if len(cs):
                fh.write(f"{vocab.entities[e]}\t{'|'.join(table.names[c] for c in cs)}\n")


def compute_concept_prior(store: TkgStore, table: ConceptTable) -> ConceptTable:
    """Set ``P(c | r) = n_c / sum_c' n_c'`` over objects of r's background facts.

    Inverse relations use the subjects of the original facts as their objects.
    Relations whose objects carry no concepts keep an all-zero row and
    ``has_prior = False``.
    """
    n_rel = store.vocab.n_relations
    rel = np.concatenate([store.r, Vocab.inverse_of(store.r) if len(store.r) else store.r])
    obj = np.concatenate([store.o, store.s])
    ptr = table.ent_ptr
    if len(ptr) - 1 < store.vocab.n_entities:
        ptr = np.concatenate([ptr, np.full(store.vocab.n_entities + 1 - len(ptr), ptr[-1])])
    counts = kernels.concept_counts(rel, obj, ptr, table.ent_concepts, n_rel, table.n_concepts)
    totals = counts.sum(axis=1)
    prior = np.zeros(counts.shape, dtype=np.float64)
    nz = totals > 0
    prior[nz] = counts[nz] / totals[nz, None]
    return ConceptTable(table.names, ptr, table.ent_concepts, prior, nz)
