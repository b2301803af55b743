"""Candidate construction: splits, negatives, distant supervision, synthetic benchmarks."""

from __future__ import annotations

import logging
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .kg import (
    DOMAIN,
    GENERAL,
    Fact,
    KGFormatError,
    KnowledgeGraph,
    UnifiedVocabulary,
    build_unified,
    candidate_is_fusable,
    load_alignment,
    load_triples,
    write_alignment,
    write_triples,
)
from .numkit import make_rng

log = logging.getLogger(__name__)

GOLD, DISTANT, CORRUPTED = "gold", "distant", "corrupted"
SCHEME_TRAIN_FRACTION = {"s1": 0.80, "s2": 0.70}

# slot probabilities for corruption: tail, head, relation
CORRUPTION_MIX = (0.4, 0.4, 0.2)
MAX_CORRUPTION_ATTEMPTS = 100


@dataclass(frozen=True)
class LabeledCandidate:
    triple: Fact
    label: int
    source_fact: Optional[Fact] = None
    provenance: str = GOLD

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.provenance == DISTANT and self.source_fact is None:
            raise ValueError("distant candidates need a source fact")


@dataclass
class DatasetSplit:
    train: list[LabeledCandidate]
    valid: list[LabeledCandidate]
    test: list[LabeledCandidate]
    scheme: str
    seed: int


class DistantPair(NamedTuple):
    gkg_fact: Fact
    dkg_fact: Fact
    inverted: bool


def _balanced_take(pos: list, neg: list, n: int, pos_first: bool):
    """Take ``n`` items, as close to half/half as the pools allow."""
    n_pos = (n + 1) // 2 if pos_first else n // 2
    n_pos = min(n_pos, len(pos))
    n_neg = min(n - n_pos, len(neg))
    n_pos = min(n - n_neg, len(pos))
    return pos[:n_pos] + neg[:n_neg], pos[n_pos:], neg[n_neg:]


def split_dataset(candidates: Sequence[LabeledCandidate], scheme: str, seed: int) -> DatasetSplit:
    """Shuffle and split into train/valid/test.

    The train fraction is 0.80 for ``s1`` and 0.70 for ``s2``; the remainder is
    halved between valid and test (test takes the odd item).  Valid and test are
    drawn label-balanced, train keeps whatever is left.
    """
    scheme = scheme.lower()
    if scheme not in SCHEME_TRAIN_FRACTION:
        raise ValueError(f"unknown split scheme {scheme!r}")
    n = len(candidates)
    if n < 10:
        raise ValueError(f"need at least 10 candidates to split, got {n}")
    if len(set(c.triple for c in candidates)) != n:
        raise ValueError("duplicate candidate triples")
    rng = make_rng(seed, stream=3)
    order = rng.permutation(n)
    shuffled = [candidates[i] for i in order]
    pos = [c for c in shuffled if c.label == 1]
    neg = [c for c in shuffled if c.label == 0]
    n_train = int(round(SCHEME_TRAIN_FRACTION[scheme] * n))
    n_valid = (n - n_train) // 2
    n_test = n - n_train - n_valid
    test, pos, neg = _balanced_take(pos, neg, n_test, pos_first=True)
    valid, pos, neg = _balanced_take(pos, neg, n_valid, pos_first=False)
    rank = {id(c): i for i, c in enumerate(shuffled)}
    train = sorted(pos + neg, key=lambda c: rank[id(c)])
    return DatasetSplit(train, valid, test, scheme, seed)


def split_with_entity_holdout(
    candidates: Sequence[LabeledCandidate], scheme: str, seed: int, holdout_frac: float = 0.2
) -> tuple[DatasetSplit, set[int]]:
    """Split that keeps a random ``holdout_frac`` of entities out of training.

    Candidates touching a held-out entity all go to test; the rest is split per
    ``scheme`` and its test share joins them.
    """
    ents = sorted({e for c in candidates for e in (c.triple.head, c.triple.tail)})
    rng = make_rng(seed, stream=4)
    n_hold = int(round(holdout_frac * len(ents)))
    held = set(int(e) for e in rng.choice(ents, size=n_hold, replace=False)) if n_hold else set()
    touched = [c for c in candidates if c.triple.head in held or c.triple.tail in held]
    rest = [c for c in candidates if not (c.triple.head in held or c.triple.tail in held)]
    base = split_dataset(rest, scheme, seed)
    base.test = base.test + touched
    return base, held


def sample_negatives(
    positives: Sequence[LabeledCandidate],
    vocab: UnifiedVocabulary,
    ratio: int,
    seed: int,
    exclude: Iterable = (),
) -> tuple[list[LabeledCandidate], int]:
    """Corrupt one slot of each positive ``ratio`` times.

    Tail and head replacements are drawn from all unified entities, relation
    replacements from the DKG relations.  A corruption is kept only if it is a
    legal fused triple, not a positive, not in ``exclude`` and not already
    emitted.  Returns the negatives and the number of positives skipped after
    exhausting the attempt budget.
    """
    if not positives:
        raise ValueError("sample_negatives needs at least one positive")
    rng = make_rng(seed, stream=5)
    forbidden = {c.triple for c in positives}
    forbidden.update(Fact(*t) for t in exclude)
    n_ent, n_rel = vocab.num_entities, vocab.n_dkg_relations
    cum = np.cumsum(CORRUPTION_MIX)
    out: list[LabeledCandidate] = []
    skipped = 0
    for cand in positives:
        h, r, t = cand.triple
        for _ in range(ratio):
            for _attempt in range(MAX_CORRUPTION_ATTEMPTS):
                slot = int(np.searchsorted(cum, rng.random(), side="right"))
                if slot == 0:
                    trip = Fact(h, r, int(rng.integers(n_ent)))
                elif slot == 1:
                    trip = Fact(int(rng.integers(n_ent)), r, t)
                else:
                    trip = Fact(h, int(rng.integers(n_rel)), t)
                if trip in forbidden or not candidate_is_fusable(trip, vocab):
                    continue
                forbidden.add(trip)
                out.append(LabeledCandidate(trip, 0, cand.source_fact, CORRUPTED))
                break
            else:
                skipped += 1
                break
    if skipped:
        log.warning("sample_negatives: skipped %d positives after %d attempts", skipped, MAX_CORRUPTION_ATTEMPTS)
    return out, skipped


def corrupted_slot(pos: Fact, neg: Fact) -> str:
    diff = [name for name, a, b in zip(("head", "rel", "tail"), pos, neg) if a != b]
    if len(diff) != 1:
        raise ValueError(f"{neg} differs from {pos} in {len(diff)} slots")
    return diff[0]


def build_distant_supervision(vocab: UnifiedVocabulary) -> list[DistantPair]:
    """Pair GKG and DKG facts whose endpoints are linked by alignment.

    A pair is inverted when the GKG head aligns to the DKG tail and vice versa.
    Facts are returned in unified ids, in GKG fact order.
    """
    by_pair: dict[tuple[int, int], list[Fact]] = defaultdict(list)
    for f in vocab.dkg_facts():
        by_pair[(f.head, f.tail)].append(f)
    links: dict[int, list[int]] = defaultdict(list)
    for g, d in vocab.alignment:
        links[g].append(d)
    pairs: list[DistantPair] = []
    for fg in vocab.gkg_facts():
        hs, ts = links.get(fg.head), links.get(fg.tail)
        if not hs or not ts:
            continue
        for a in hs:
            for b in ts:
                for fd in by_pair.get((a, b), ()):
                    pairs.append(DistantPair(fg, fd, False))
                if a != b:
                    for fd in by_pair.get((b, a), ()):
                        pairs.append(DistantPair(fg, fd, True))
    return pairs


# --- candidate and pair files -------------------------------------------------

def write_candidates(cands: Iterable[LabeledCandidate], vocab: UnifiedVocabulary, path) -> None:
    """``head rel tail label`` rows, plus the source GKG fact when known."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for c in cands:
            row = list(vocab.named(c.triple)) + [str(c.label)]
            if c.source_fact is not None:
                row += list(vocab.named(c.source_fact)) + [c.provenance]
            fh.write("\t".join(row) + "\n")
    os.replace(tmp, path)


def read_candidates(path, vocab: UnifiedVocabulary) -> list[LabeledCandidate]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 4:
                raise KGFormatError(path, lineno, "expected head, rel, tail, label")
            try:
                triple = vocab.resolve(*parts[:3])
                src = vocab.resolve(*parts[4:7]) if len(parts) >= 7 else None
            except KeyError as exc:
                raise KGFormatError(path, lineno, f"unknown name {exc.args[0]!r}") from None
            if parts[3] not in ("0", "1"):
                raise KGFormatError(path, lineno, f"label must be 0 or 1, got {parts[3]!r}")
            prov = parts[7] if len(parts) >= 8 else (GOLD if parts[3] == "1" else CORRUPTED)
            out.append(LabeledCandidate(triple, int(parts[3]), src, prov))
    return out


def write_pairs(pairs: Iterable[DistantPair], vocab: UnifiedVocabulary, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            row = list(vocab.named(p.gkg_fact)) + list(vocab.named(p.dkg_fact)) + [str(int(p.inverted))]
            fh.write("\t".join(row) + "\n")
    os.replace(tmp, path)


def read_pairs(path, vocab: UnifiedVocabulary) -> list[DistantPair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 7:
                raise KGFormatError(path, lineno, "expected 6 names and an inverted flag")
            out.append(DistantPair(vocab.resolve(*parts[:3]), vocab.resolve(*parts[3:6]), parts[6] == "1"))
    return out


# --- synthetic benchmark ------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    """Generator sizes; entity/relation/fact counts apply to each graph."""

    n_entities: int = 200
    n_relations: int = 10
    n_facts: int = 2000
    n_rules: int = 4
    noise: float = 0.1
    align_frac: float = 0.8
    n_types: int = 5
    dkg_image_frac: float = 0.3
    neg_ratio: int = 1

    def validate(self) -> None:
        if self.n_entities < 50 or self.n_relations < 5 or self.n_facts < 200:
            raise ValueError("synthetic graphs need >= 50 entities, 5 relations and 200 facts")
        if not 1 <= self.n_rules <= self.n_relations:
            raise ValueError(f"n_rules={self.n_rules} infeasible with {self.n_relations} relations")
        if 2 * self.n_relations > self.n_types * (self.n_types - 1):
            raise ValueError(f"{self.n_types} types give too few relation signatures")
        if not 0.0 <= self.noise < 1.0 or not 0.0 < self.align_frac <= 1.0:
            raise ValueError("noise must be in [0,1) and align_frac in (0,1]")
        if not 0.0 <= self.dkg_image_frac < 1.0:
            raise ValueError("dkg_image_frac must be in [0,1)")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                kw[f.name] = type(f.default)(d[f.name])
        return cls(**kw)


@dataclass
class SyntheticBenchmark:
    dkg: KnowledgeGraph
    gkg: KnowledgeGraph
    alignment: list[tuple[str, str]]
    gold: list[LabeledCandidate]
    true_rules: dict[str, str]
    config: SyntheticConfig
    seed: int
    vocab: UnifiedVocabulary = field(repr=False, default=None)

    @property
    def positives(self) -> list[LabeledCandidate]:
        return [c for c in self.gold if c.label == 1]


def _pick_signatures(rng, n_types: int, n_needed: int, n_gkg: int):
    # head and tail types differ: a same-type signature averages to a zero translation
    all_sigs = [(a, b) for a in range(n_types) for b in range(n_types) if a != b]
    for _ in range(1000):
        perm = rng.permutation(len(all_sigs))
        sigs = [all_sigs[i] for i in perm[:n_needed]]
        g_cover = {x for s in sigs[:n_gkg] for x in s}
        if len(g_cover) == n_types:
            return sigs
    raise ValueError("could not draw relation signatures covering every type")


def _typed_facts(rng, n_facts, sig_of_rel, ents_by_type, seed_facts=()):
    facts: list[tuple[int, int, int]] = list(seed_facts)
    seen = set(facts)
    n_rel = len(sig_of_rel)
    budget = 50 * n_facts
    while len(facts) < n_facts and budget > 0:
        budget -= 1
        r = int(rng.integers(n_rel))
        options = sig_of_rel[r]
        ht, tt = options[int(rng.integers(len(options)))]
        h = int(ents_by_type[ht][rng.integers(len(ents_by_type[ht]))])
        t = int(ents_by_type[tt][rng.integers(len(ents_by_type[tt]))])
        if h == t or (h, r, t) in seen:
            continue
        seen.add((h, r, t))
        facts.append((h, r, t))
    if len(facts) < n_facts:
        raise ValueError("fact budget exhausted; too many facts for the entity/type layout")
    return facts


def generate_synthetic_benchmark(cfg: SyntheticConfig, seed: int) -> SyntheticBenchmark:
    """Typed two-graph world with a hidden many-to-one relation map.

    Entities carry latent types and every relation has (head type, tail type)
    signatures.  A random subset of GKG relations (the rules) maps onto DKG
    relations with matching signatures.  The gold positives are the images of
    GKG facts between aligned entities under that map, minus those already in
    the DKG and minus a ``noise`` fraction held out entirely.  Negatives come
    from :func:`sample_negatives` and never hit any mapped image.
    """
    cfg.validate()
    rng = make_rng(seed, stream=101)
    n, R, T = cfg.n_entities, cfg.n_relations, cfg.n_types

    types_g = rng.permutation(np.arange(n) % T)
    types_d = rng.permutation(np.arange(n) % T)
    by_type_g = [np.flatnonzero(types_g == k) for k in range(T)]
    by_type_d = [np.flatnonzero(types_d == k) for k in range(T)]

    sigs = _pick_signatures(rng, T, 2 * R, R)
    gkg_sig = [[sigs[p]] for p in range(R)]
    sources = sorted(int(x) for x in rng.choice(R, size=cfg.n_rules, replace=False))
    targets = [int(x) for x in rng.integers(R, size=cfg.n_rules)]
    rule_map = dict(zip(sources, targets))
    dkg_sig: list[list[tuple[int, int]]] = [[] for _ in range(R)]
    for p in sources:
        dkg_sig[rule_map[p]].append(sigs[p])
    for q in range(R):
        if not dkg_sig[q]:
            dkg_sig[q].append(sigs[R + q])

    gkg_raw = _typed_facts(rng, cfg.n_facts, gkg_sig, by_type_g)

    # alignment: same-type matching over a random subset of GKG entities
    n_align = int(round(cfg.align_frac * n))
    chosen = np.sort(rng.choice(n, size=n_align, replace=False))
    g2d: dict[int, int] = {}
    for k in range(T):
        gs = [int(g) for g in chosen if types_g[g] == k]
        ds = [int(d) for d in rng.permutation(by_type_d[k])]
        for g, d in zip(gs, ds):
            g2d[g] = d

    images: dict[tuple[int, int, int], tuple[int, int, int]] = {}
    for h, p, t in gkg_raw:
        if p in rule_map and h in g2d and t in g2d:
            images.setdefault((g2d[h], rule_map[p], g2d[t]), (h, p, t))
    image_list = list(images)
    n_known = int(round(cfg.dkg_image_frac * len(image_list)))
    known_idx = sorted(int(i) for i in rng.choice(len(image_list), size=n_known, replace=False))
    dkg_raw = _typed_facts(rng, cfg.n_facts, dkg_sig, by_type_d, [image_list[i] for i in known_idx])

    dname = lambda i: f"d_e{i}"
    gname = lambda i: f"g_e{i}"
    dkg = KnowledgeGraph.from_triples(DOMAIN, ((dname(h), f"d_r{r}", dname(t)) for h, r, t in dkg_raw))
    gkg = KnowledgeGraph.from_triples(GENERAL, ((gname(h), f"g_r{r}", gname(t)) for h, r, t in gkg_raw))
    alignment = [(gname(g), dname(d)) for g, d in sorted(g2d.items())
                 if gkg.has_entity(gname(g)) and dkg.has_entity(dname(d))]
    vocab = build_unified(dkg, gkg, alignment)

    def to_uid(raw, general: bool):
        h, r, t = raw
        if general:
            return vocab.resolve(gname(h), f"g_r{r}", gname(t))
        return Fact(vocab.entity_id(dname(h)) if dkg.has_entity(dname(h)) else -1,
                    vocab.relation_id(f"d_r{r}"),
                    vocab.entity_id(dname(t)) if dkg.has_entity(dname(t)) else -1)

    all_images = []
    fusable = []
    for img, src in images.items():
        u = to_uid(img, general=False)
        if u.head < 0 or u.tail < 0:
            # DKG entity never used by any DKG fact; it has no id
            continue
        all_images.append(u)
        if candidate_is_fusable(u, vocab):
            fusable.append((u, to_uid(src, general=True)))
    n_drop = int(round(cfg.noise * len(fusable)))
    drop = set(int(i) for i in rng.choice(len(fusable), size=n_drop, replace=False))
    positives = [LabeledCandidate(u, 1, src, GOLD) for i, (u, src) in enumerate(fusable) if i not in drop]
    negatives, _ = sample_negatives(positives, vocab, cfg.neg_ratio, seed, exclude=all_images)
    true_rules = {f"g_r{p}": f"d_r{q}" for p, q in sorted(rule_map.items())}
    return SyntheticBenchmark(dkg, gkg, alignment, positives + negatives, true_rules, cfg, seed, vocab)


def replay_rules(gkg: KnowledgeGraph, dkg: KnowledgeGraph, alignment, true_rules: dict[str, str]):
    """Mapped images of GKG facts as named triples (independent of the generator)."""
    g2d = {}
    for g_name, d_name in alignment:
        g2d.setdefault(g_name, d_name)
    out = []
    seen = set()
    for f in gkg.facts:
        h, r, t = gkg.named(f)
        if r in true_rules and h in g2d and t in g2d:
            img = (g2d[h], true_rules[r], g2d[t])
            if img not in seen:
                seen.add(img)
                out.append(img)
    return out


NEGATIVE_PROTOCOL = "slot-corruption tail/head/rel=0.4/0.4/0.2 ratio={ratio} legal-only exclude-mapped-images"


def benchmark_manifest(bench: SyntheticBenchmark) -> dict[str, str]:
    m = {"seed": str(bench.seed)}
    for k, v in asdict(bench.config).items():
        m[k] = str(v)
    m["negatives"] = NEGATIVE_PROTOCOL.format(ratio=bench.config.neg_ratio)
    m["n_positive"] = str(len(bench.positives))
    m["n_gold"] = str(len(bench.gold))
    return m


def write_benchmark(bench: SyntheticBenchmark, out_dir) -> None:
    from .manifest import write_manifest

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_triples(bench.dkg, out / "dkg.tsv")
    write_triples(bench.gkg, out / "gkg.tsv")
    write_alignment(bench.alignment, out / "alignment.tsv")
    write_candidates(bench.gold, bench.vocab, out / "gold.tsv")
    tmp = out / "rules.tsv.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for g, d in bench.true_rules.items():
            fh.write(f"{g}\t{d}\n")
    os.replace(tmp, out / "rules.tsv")
    write_manifest(out / "manifest", benchmark_manifest(bench))


def load_graphs(dkg_path, gkg_path, alignment_path) -> UnifiedVocabulary:
    dkg = load_triples(dkg_path, DOMAIN)
    gkg = load_triples(gkg_path, GENERAL)
    align = load_alignment(alignment_path) if alignment_path else []
    try:
        return build_unified(dkg, gkg, align)
    except KGFormatError as exc:
        raise KGFormatError(alignment_path, exc.lineno, str(exc).split(": ", 1)[1]) from None


def load_benchmark(path) -> SyntheticBenchmark:
    from .manifest import read_manifest

    d = Path(path)
    vocab = load_graphs(d / "dkg.tsv", d / "gkg.tsv", d / "alignment.tsv")
    alignment = [(a, b) for a, b, _ in load_alignment(d / "alignment.tsv")]
    gold = read_candidates(d / "gold.tsv", vocab)
    rules = {}
    if (d / "rules.tsv").exists():
        with open(d / "rules.tsv", encoding="utf-8") as fh:
            for line in fh:
                g, q = line.rstrip("\n").split("\t")
                rules[g] = q
    man = read_manifest(d / "manifest") if (d / "manifest").exists() else {}
    cfg = SyntheticConfig.from_dict(man)
    return SyntheticBenchmark(vocab.dkg, vocab.gkg, alignment, gold, rules, cfg, int(man.get("seed", 0)), vocab)
