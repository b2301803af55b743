"""Triple classification metrics, transfer splits, relevant-entity finding, ablations, scaling."""

from __future__ import annotations

import gc
import os
import statistics
import time
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .dataset import LabeledCandidate, SyntheticBenchmark
from .embed import EmbeddingTable
from .kg import UnifiedVocabulary
from .model import VARIANTS, ExeFuseModel
from .trainer import fusion_candidates


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def acc(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def row(self) -> list[str]:
        vals = [self.acc, self.precision, self.recall, self.f1]
        return [f"{v:.6f}" for v in vals] + [str(self.tp), str(self.fp), str(self.tn), str(self.fn)]


METRICS_HEADER = "config\tacc\tp\tr\tf1\ttp\tfp\ttn\tfn"


def confusion(probs, labels, delta: float) -> Metrics:
    """Predict positive iff ``p > delta`` (a tie counts as negative)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    pred = probs > delta
    pos = labels == 1
    return Metrics(int(np.sum(pred & pos)), int(np.sum(pred & ~pos)),
                   int(np.sum(~pred & ~pos)), int(np.sum(~pred & pos)))


def candidate_arrays(cands: Sequence[LabeledCandidate]):
    trip = np.asarray([c.triple for c in cands], dtype=np.int64).reshape(-1, 3)
    return trip, np.asarray([c.label for c in cands], dtype=int)


def classify_triples(model: ExeFuseModel, tab: EmbeddingTable, labeled: Sequence[LabeledCandidate],
                     delta: float = 0.5) -> Metrics:
    if not labeled:
        raise ValueError("cannot evaluate an empty candidate set")
    trip, y = candidate_arrays(labeled)
    return confusion(model.predict(tab, trip), y, delta)


def split_seen_unseen(test: Sequence[LabeledCandidate], train: Sequence[LabeledCandidate]):
    """A test candidate is unseen if its head or tail never occurs in training."""
    seen_ents = {e for c in train for e in (c.triple.head, c.triple.tail)}
    seen, unseen = [], []
    for c in test:
        (seen if c.triple.head in seen_ents and c.triple.tail in seen_ents else unseen).append(c)
    return seen, unseen


# --- relevant entity finding --------------------------------------------------

def ref_labels(positives: Sequence[LabeledCandidate], vocab: UnifiedVocabulary) -> list[tuple[int, int]]:
    """GKG entities with at least one fact; relevant iff some positive was derived from one of its facts."""
    relevant = set()
    for c in positives:
        if c.source_fact is not None:
            relevant.update((c.source_fact.head, c.source_fact.tail))
    incident = {e for f in vocab.gkg_facts() for e in (f.head, f.tail)}
    return [(e, int(e in relevant)) for e in sorted(incident)]


class RefResult(NamedTuple):
    metrics: Metrics
    isolated: int
    scores: dict


def evaluate_ref(model: ExeFuseModel, tab: EmbeddingTable, entities: Sequence[tuple[int, int]],
                 vocab: UnifiedVocabulary, delta: float = 0.5) -> RefResult:
    """Entity is relevant iff its best fusion candidate (over incident GKG facts) beats ``delta``.

    Entities with no incident GKG fact are predicted irrelevant and counted in
    ``isolated``.
    """
    facts, src_idx, trip = fusion_candidates(vocab)
    probs = model.predict(tab, trip) if len(trip) else np.zeros(0)
    best_src = np.zeros(len(facts))
    np.maximum.at(best_src, src_idx, probs)
    score: dict[int, float] = {}
    for i, (h, _, t) in enumerate(facts.tolist()):
        for e in (h, t):
            score[e] = max(score.get(e, 0.0), best_src[i])
    isolated = sum(1 for e, _ in entities if e not in score)
    pred = np.array([score.get(e, 0.0) for e, _ in entities])
    labels = np.array([lab for _, lab in entities])
    return RefResult(confusion(pred, labels, delta), isolated, score)


# --- rule usage ---------------------------------------------------------------

class RuleUsage(NamedTuple):
    mean_prob: np.ndarray   # (L,) average selector weight
    top_count: np.ndarray   # (L,) candidates on which the rule had the largest weight


def rule_usage(model: ExeFuseModel, tab: EmbeddingTable, trip, chunk: int = 512) -> RuleUsage:
    """Selector statistics per rule; descriptive only, rules have no symbolic reading."""
    if not model.uses_rules:
        raise ValueError(f"variant {model.config.variant!r} has no rule bank")
    trip = np.asarray(trip, dtype=np.int64).reshape(-1, 3)
    L = model.rules.size
    total, top = np.zeros(L), np.zeros(L, dtype=np.int64)
    for s in range(0, len(trip), chunk):
        q, _ = model.encode_batch(tab, trip[s:s + chunk])
        probs = model.execute_batch(q)[1]["probs"]
        total += probs.sum(0)
        top += np.bincount(probs.argmax(1), minlength=L)
    return RuleUsage(total / max(len(trip), 1), top)


def write_rule_usage(usage: RuleUsage, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("rule\tmean_prob\ttop_count\n")
        for i, (m, c) in enumerate(zip(usage.mean_prob, usage.top_count)):
            fh.write(f"{i}\t{m:.6f}\t{c}\n")
    os.replace(tmp, path)


# --- ablation -----------------------------------------------------------------

def run_ablation(variant: str, bench: SyntheticBenchmark, cfg, table: Optional[EmbeddingTable] = None,
                 split=None, return_result: bool = False):
    """Build, train and test one model variant; the baseline is never touched."""
    from .pipeline import run_pipeline

    if variant not in VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}")
    res = run_pipeline(bench.vocab, bench.gold, cfg.with_variant(variant), table=table, split=split)
    m = classify_triples(res.model, res.table, res.split.test, cfg.train.delta)
    return (m, res) if return_result else m


# --- scaling ------------------------------------------------------------------

class ScalingPoint(NamedTuple):
    size: int
    mean: float
    median: float
    std: float


def measure_scaling(model: ExeFuseModel, tab: EmbeddingTable, vocab: UnifiedVocabulary, gkg_facts,
                    sizes: Sequence[int], repetitions: int = 5) -> list[ScalingPoint]:
    """Wall time of the fusion scoring pass over the first ``size`` GKG facts.

    Repetitions are interleaved across sizes after one untimed warm-up pass,
    so slow drift in machine speed is shared by all sizes instead of landing
    on one of them.  The garbage collector is paused while timing, as timeit
    does, so collections of unrelated objects are not billed to one size.
    """
    sizes = list(sizes)
    if len(sizes) < 2 or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly increasing with at least two entries")
    facts = np.asarray(gkg_facts, dtype=np.int64).reshape(-1, 3)
    if sizes[-1] > len(facts):
        raise ValueError(f"only {len(facts)} GKG facts available, asked for {sizes[-1]}")

    def run(n: int) -> float:
        t0 = time.perf_counter()
        _, _, trip = fusion_candidates(vocab, facts[:n])
        model.predict(tab, trip)
        return time.perf_counter() - t0

    run(sizes[0])
    times: dict[int, list[float]] = {n: [] for n in sizes}
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repetitions):
            for n in sizes:
                times[n].append(run(n))
    finally:
        if was_enabled:
            gc.enable()
    return [ScalingPoint(n, statistics.fmean(times[n]), statistics.median(times[n]),
                         statistics.pstdev(times[n])) for n in sizes]


# --- reports ------------------------------------------------------------------

def write_metrics(rows: Sequence[tuple[str, Metrics]], path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(METRICS_HEADER + "\n")
        for name, m in rows:
            fh.write("\t".join([name] + m.row()) + "\n")
    os.replace(tmp, path)


def write_predictions(cands: Sequence[LabeledCandidate], probs, vocab: UnifiedVocabulary, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("head\trel\ttail\tlabel\tprob\n")
        for c, p in zip(cands, probs):
            fh.write("\t".join(list(vocab.named(c.triple)) + [str(c.label), f"{p:.6f}"]) + "\n")
    os.replace(tmp, path)
