"""Translational pretraining of the joint entity/relation table.

Training runs over ``F^d ∪ F^g`` plus one ``<sameAs>`` fact per alignment pair,
so aligned entities end up near each other while keeping separate rows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .kg import Fact, UnifiedVocabulary
from .numkit import make_rng, xavier_uniform

log = logging.getLogger(__name__)


@dataclass
class EmbeddingTable:
    entity_rows: np.ndarray
    relation_rows: np.ndarray
    loss_history: list[float] = field(default_factory=list)

    @property
    def d_emb(self) -> int:
        return self.entity_rows.shape[1]

    def lookup(self, heads, rels, tails):
        return self.entity_rows[heads], self.relation_rows[rels], self.entity_rows[tails]


@dataclass(frozen=True)
class PretrainConfig:
    d_emb: int = 64
    epochs: int = 200
    margin: float = 1.0
    lr: float = 0.01
    neg_per_pos: int = 1
    batch_size: int = 128
    gkg_only: bool = False


def init_table(n_entities: int, n_relations: int, d_emb: int, seed: int) -> EmbeddingTable:
    rng = make_rng(seed, stream=11)
    ent = xavier_uniform(rng, n_entities, d_emb)
    rel = xavier_uniform(rng, n_relations, d_emb)
    return EmbeddingTable(ent, rel)


def joint_facts(vocab: UnifiedVocabulary, gkg_only: bool = False) -> np.ndarray:
    facts = vocab.gkg_facts()
    if not gkg_only:
        facts = vocab.dkg_facts() + facts
        facts += [Fact(g, vocab.same_as, d) for g, d in vocab.alignment]
    return np.array(facts, dtype=np.int64).reshape(-1, 3)


def _distances(ent, rel, trip):
    diff = ent[trip[:, 0]] + rel[trip[:, 1]] - ent[trip[:, 2]]
    return diff, np.sqrt((diff * diff).sum(1))


def pretrain_translational(vocab: UnifiedVocabulary, cfg: PretrainConfig, seed: int) -> EmbeddingTable:
    """Margin-ranking SGD on ``max(0, margin + ||h+r-t|| - ||h'+r-t'||)``.

    Each positive is paired with ``neg_per_pos`` corruptions (head or tail,
    equiprobable, drawn from all unified entities).  Batch losses are summed;
    entity rows are renormalised to unit length after every epoch.
    """
    if cfg.d_emb < 8:
        raise ValueError("d_emb must be >= 8")
    facts = joint_facts(vocab, cfg.gkg_only)
    if len(facts) == 0:
        raise ValueError("joint fact set is empty")
    tab = init_table(vocab.num_entities, vocab.num_relations, cfg.d_emb, seed)
    ent, rel = tab.entity_rows, tab.relation_rows
    rng = make_rng(seed, stream=12)
    n, n_ent = len(facts), vocab.num_entities
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            pos = np.repeat(facts[order[start:start + cfg.batch_size]], cfg.neg_per_pos, axis=0)
            neg = pos.copy()
            which = rng.random(len(pos)) < 0.5
            repl = rng.integers(n_ent, size=len(pos))
            neg[which, 0] = repl[which]
            neg[~which, 2] = repl[~which]
            dp, sp = _distances(ent, rel, pos)
            dn, sn = _distances(ent, rel, neg)
            viol = cfg.margin + sp - sn
            active = viol > 0
            total += float(viol[active].sum())
            if not active.any():
                continue
            gp = dp[active] / np.maximum(sp[active], 1e-12)[:, None]
            gn = dn[active] / np.maximum(sn[active], 1e-12)[:, None]
            pa, na = pos[active], neg[active]
            g_ent = np.zeros_like(ent)
            g_rel = np.zeros_like(rel)
            np.add.at(g_ent, pa[:, 0], gp)
            np.add.at(g_ent, pa[:, 2], -gp)
            np.add.at(g_rel, pa[:, 1], gp - gn)
            np.add.at(g_ent, na[:, 0], -gn)
            np.add.at(g_ent, na[:, 2], gn)
            ent -= cfg.lr * g_ent
            rel -= cfg.lr * g_rel
        ent /= np.maximum(np.linalg.norm(ent, axis=1, keepdims=True), 1e-12)
        tab.loss_history.append(total / (n * cfg.neg_per_pos))
    return tab


def score_triple(tab: EmbeddingTable, t) -> float:
    """``||h + r - t||_2``; lower is more plausible."""
    h, r, tl = t
    return float(np.linalg.norm(tab.entity_rows[h] + tab.relation_rows[r] - tab.entity_rows[tl]))


def score_triples(tab: EmbeddingTable, trip: np.ndarray) -> np.ndarray:
    trip = np.asarray(trip, dtype=np.int64).reshape(-1, 3)
    return _distances(tab.entity_rows, tab.relation_rows, trip)[1]


def save_table(tab: EmbeddingTable, path, extra_meta=None) -> None:
    meta = {"d_emb": tab.d_emb, "n_entities": tab.entity_rows.shape[0],
            "n_relations": tab.relation_rows.shape[0]}
    meta.update(extra_meta or {})
    save_checkpoint(path, "embeddings", meta,
                    {"entity_rows": tab.entity_rows, "relation_rows": tab.relation_rows})


def load_table(path) -> EmbeddingTable:
    _, blocks = load_checkpoint(path, kind="embeddings")
    return EmbeddingTable(blocks["entity_rows"].copy(), blocks["relation_rows"].copy())
