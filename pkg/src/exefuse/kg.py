"""Interned triple stores for the domain graph (DKG) and the general graph (GKG)."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, NamedTuple

import numpy as np

DOMAIN = "domain"
GENERAL = "general"
SAME_AS = "<sameAs>"


class Fact(NamedTuple):
    head: int
    rel: int
    tail: int


class KGFormatError(ValueError):
    """Malformed or unresolvable line in a triple/alignment file."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


@dataclass
class KnowledgeGraph:
    tag: str
    entities: list[str] = field(default_factory=list)
    relations: list[str] = field(default_factory=list)
    facts: list[Fact] = field(default_factory=list)
    _ent_index: dict[str, int] = field(default_factory=dict, repr=False)
    _rel_index: dict[str, int] = field(default_factory=dict, repr=False)
    _fact_set: set[Fact] = field(default_factory=set, repr=False)

    def __post_init__(self):
        if self.tag not in (DOMAIN, GENERAL):
            raise ValueError(f"unknown graph tag {self.tag!r}")

    # interning is insertion-ordered so ids follow file order
    def intern_entity(self, name: str) -> int:
        idx = self._ent_index.get(name)
        if idx is None:
            idx = len(self.entities)
            self.entities.append(name)
            self._ent_index[name] = idx
        return idx

    def intern_relation(self, name: str) -> int:
        idx = self._rel_index.get(name)
        if idx is None:
            idx = len(self.relations)
            self.relations.append(name)
            self._rel_index[name] = idx
        return idx

    def add_fact(self, head: str, rel: str, tail: str) -> bool:
        """Insert a named triple; returns False if it was already present."""
        f = Fact(self.intern_entity(head), self.intern_relation(rel), self.intern_entity(tail))
        if f in self._fact_set:
            return False
        self.facts.append(f)
        self._fact_set.add(f)
        return True

    def entity_id(self, name: str) -> int:
        return self._ent_index[name]

    def relation_id(self, name: str) -> int:
        return self._rel_index[name]

    def has_entity(self, name: str) -> bool:
        return name in self._ent_index

    def has_relation(self, name: str) -> bool:
        return name in self._rel_index

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def __len__(self) -> int:
        return len(self.facts)

    def __contains__(self, f) -> bool:
        return Fact(*f) in self._fact_set

    def named(self, f: Fact) -> tuple[str, str, str]:
        return self.entities[f.head], self.relations[f.rel], self.entities[f.tail]

    def validate(self) -> None:
        if len(self._fact_set) != len(self.facts):
            raise ValueError("fact index out of sync with fact sequence")
        ne, nr = self.num_entities, self.num_relations
        for f in self.facts:
            if not (0 <= f.head < ne and 0 <= f.tail < ne and 0 <= f.rel < nr):
                raise ValueError(f"fact {f} references an unknown id")
        for i, name in enumerate(self.entities):
            if self._ent_index[name] != i:
                raise ValueError(f"entity index broken at {name!r}")
        for i, name in enumerate(self.relations):
            if self._rel_index[name] != i:
                raise ValueError(f"relation index broken at {name!r}")

    def subgraph(self, facts: Iterable[Fact]) -> "KnowledgeGraph":
        """Same vocabulary, restricted fact list (used for GKG truncation)."""
        g = KnowledgeGraph(self.tag, list(self.entities), list(self.relations))
        g._ent_index = dict(self._ent_index)
        g._rel_index = dict(self._rel_index)
        for f in facts:
            f = Fact(*f)
            if f not in g._fact_set:
                g.facts.append(f)
                g._fact_set.add(f)
        return g

    @classmethod
    def from_triples(cls, tag: str, triples: Iterable[tuple[str, str, str]]) -> "KnowledgeGraph":
        g = cls(tag)
        for h, r, t in triples:
            g.add_fact(h, r, t)
        return g


def contains_fact(g: KnowledgeGraph, t) -> bool:
    return t in g


def _tsv_rows(path, ncols: int):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < ncols:
                raise KGFormatError(path, lineno, f"expected {ncols} tab-separated columns, got {len(parts)}")
            yield lineno, parts


def load_triples(path, tag: str) -> KnowledgeGraph:
    """Read ``head<TAB>relation<TAB>tail`` lines.

    Extra columns (e.g. ICEWS timestamps) are dropped; duplicate lines are
    stored once.
    """
    g = KnowledgeGraph(tag)
    for _, parts in _tsv_rows(path, 3):
        g.add_fact(parts[0], parts[1], parts[2])
    return g


def write_triples(g: KnowledgeGraph, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for f in g.facts:
            fh.write("\t".join(g.named(f)) + "\n")
    os.replace(tmp, path)


def load_alignment(path) -> list[tuple[str, str, int]]:
    """``gkg_entity<TAB>dkg_entity`` pairs, with their line numbers."""
    return [(parts[0], parts[1], lineno) for lineno, parts in _tsv_rows(path, 2)]


def write_alignment(pairs: Iterable[tuple[str, str]], path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for g_name, d_name in pairs:
            fh.write(f"{g_name}\t{d_name}\n")
    os.replace(tmp, path)


class UnifiedVocabulary:
    """Joint id space over both graphs.

    DKG entities take unified ids ``0..|V^d|-1`` and GKG entities follow, so a
    unified id always identifies its source graph.  Relations are laid out the
    same way with one reserved ``<sameAs>`` relation appended last.  Entities
    are never merged by name; names present in both graphs get ``dkg:``/``gkg:``
    prefixes in the unified namespace.
    """

    def __init__(self, dkg: KnowledgeGraph, gkg: KnowledgeGraph, alignment: list[tuple[int, int]]):
        self.dkg = dkg
        self.gkg = gkg
        self.n_dkg_entities = dkg.num_entities
        self.n_gkg_entities = gkg.num_entities
        self.n_dkg_relations = dkg.num_relations
        self.n_gkg_relations = gkg.num_relations

        ent_clash = set(dkg.entities) & set(gkg.entities)
        rel_clash = (set(dkg.relations) & set(gkg.relations)) | {SAME_AS}
        self.entity_names = [f"dkg:{n}" if n in ent_clash else n for n in dkg.entities]
        self.entity_names += [f"gkg:{n}" if n in ent_clash else n for n in gkg.entities]
        self.relation_names = [f"dkg:{n}" if n in rel_clash else n for n in dkg.relations]
        self.relation_names += [f"gkg:{n}" if n in rel_clash else n for n in gkg.relations]
        self.relation_names.append(SAME_AS)
        self._ent_index = {n: i for i, n in enumerate(self.entity_names)}
        self._rel_index = {n: i for i, n in enumerate(self.relation_names)}

        # alignment stored in unified ids, (gkg entity, dkg entity)
        self.alignment: list[tuple[int, int]] = [(self.gkg_entity(g), d) for g, d in alignment]
        self.gkg_to_dkg: dict[int, int] = {}
        for g, d in self.alignment:
            self.gkg_to_dkg.setdefault(g, d)
        self.dkg_to_gkg: dict[int, int] = {}
        for g, d in self.alignment:
            self.dkg_to_gkg.setdefault(d, g)
        self._dkg_fact_set = dkg._fact_set

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    @property
    def same_as(self) -> int:
        return len(self.relation_names) - 1

    def gkg_entity(self, local: int) -> int:
        return self.n_dkg_entities + local

    def gkg_relation(self, local: int) -> int:
        return self.n_dkg_relations + local

    def is_dkg_entity(self, uid: int) -> bool:
        return 0 <= uid < self.n_dkg_entities

    def is_dkg_relation(self, uid: int) -> bool:
        return 0 <= uid < self.n_dkg_relations

    def is_gkg_entity(self, uid: int) -> bool:
        return self.n_dkg_entities <= uid < self.num_entities

    def dkg_fact(self, f: Fact) -> Fact:
        return Fact(*f)

    def gkg_fact(self, f: Fact) -> Fact:
        return Fact(self.gkg_entity(f.head), self.gkg_relation(f.rel), self.gkg_entity(f.tail))

    def dkg_facts(self) -> list[Fact]:
        return list(self.dkg.facts)

    def gkg_facts(self) -> list[Fact]:
        return [self.gkg_fact(f) for f in self.gkg.facts]

    def entity_id(self, name: str) -> int:
        return self._ent_index[name]

    def relation_id(self, name: str) -> int:
        return self._rel_index[name]

    def named(self, f) -> tuple[str, str, str]:
        return self.entity_names[f[0]], self.relation_names[f[1]], self.entity_names[f[2]]

    def resolve(self, head: str, rel: str, tail: str) -> Fact:
        return Fact(self._ent_index[head], self._rel_index[rel], self._ent_index[tail])

    def in_dkg(self, t) -> bool:
        h, r, tl = t
        if not (self.is_dkg_entity(h) and self.is_dkg_entity(tl) and self.is_dkg_relation(r)):
            return False
        return Fact(h, r, tl) in self._dkg_fact_set

    def endpoint(self, gkg_uid: int) -> int:
        """Aligned DKG counterpart of a GKG entity, or the entity itself."""
        return self.gkg_to_dkg.get(gkg_uid, gkg_uid)

    @cached_property
    def endpoint_map(self) -> np.ndarray:
        """Array form of :meth:`endpoint` over every unified entity id."""
        out = np.arange(self.num_entities, dtype=np.int64)
        for g, d in self.gkg_to_dkg.items():
            out[g] = d
        return out

    def triple_keys(self, trip) -> np.ndarray:
        trip = np.asarray(trip, dtype=np.int64).reshape(-1, 3)
        return (trip[:, 0] * self.num_relations + trip[:, 1]) * self.num_entities + trip[:, 2]

    @cached_property
    def _dkg_keys(self) -> np.ndarray:
        return np.sort(self.triple_keys(list(self.dkg.facts)))

    def in_dkg_batch(self, trip) -> np.ndarray:
        """Vectorised :meth:`in_dkg` over an ``(n, 3)`` array of unified ids."""
        return np.isin(self.triple_keys(trip), self._dkg_keys, assume_unique=False)


def build_unified(dkg: KnowledgeGraph, gkg: KnowledgeGraph, alignment) -> UnifiedVocabulary:
    """Assign unified ids and record alignment links.

    ``alignment`` holds ``(gkg_name, dkg_name)`` or ``(gkg_name, dkg_name, lineno)``
    entries as produced by :func:`load_alignment`.
    """
    dkg.validate()
    gkg.validate()
    resolved = []
    for i, item in enumerate(alignment, 1):
        g_name, d_name = item[0], item[1]
        lineno = item[2] if len(item) > 2 else i
        if not gkg.has_entity(g_name):
            raise KGFormatError("alignment", lineno, f"unknown GKG entity {g_name!r}")
        if not dkg.has_entity(d_name):
            raise KGFormatError("alignment", lineno, f"unknown DKG entity {d_name!r}")
        resolved.append((gkg.entity_id(g_name), dkg.entity_id(d_name)))
    return UnifiedVocabulary(dkg, gkg, resolved)


def candidate_is_fusable(t, vocab: UnifiedVocabulary) -> bool:
    """Legality of a fused triple: endpoints anywhere, DKG relation, not already in the DKG."""
    h, r, tl = t
    if not (0 <= h < vocab.num_entities and 0 <= tl < vocab.num_entities):
        return False
    if not vocab.is_dkg_relation(r):
        return False
    return not vocab.in_dkg((h, r, tl))


def both_endpoints_general(t, vocab: UnifiedVocabulary) -> bool:
    """Fusable but with no DKG entity at all; reported separately in fuse output."""
    return vocab.is_gkg_entity(t[0]) and vocab.is_gkg_entity(t[2])
