"""Joint optimisation of the fusion and rule-consistency losses."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .dataset import CORRUPTION_MIX, DatasetSplit, DistantPair, LabeledCandidate
from .embed import EmbeddingTable
from .kg import Fact, UnifiedVocabulary, both_endpoints_general, candidate_is_fusable
from .model import ExeFuseModel, PrototypeSet, encode_bwd, encode_fwd, encoder_input, ground_fwd
from .numkit import Adam, kmeans, make_rng, sigmoid, softplus

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 10
    delta: float = 0.5
    seed: int = 0
    resample_negatives: bool = False
    rule_reduction: str = "mean"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.rule_reduction not in ("sum", "mean"):
            raise ValueError("rule_reduction must be 'sum' or 'mean'")


@dataclass(frozen=True)
class DomainEncoderConfig:
    epochs: int = 30
    lr: float = 1e-3
    margin: float = 4.0
    batch_size: int = 128
    kmeans_iter: int = 25


class EpochRecord(NamedTuple):
    epoch: int
    J: float
    J_main: float
    J_rule: float
    val_f1: float
    val_loss: float = float("nan")


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_f1: float = 0.0

    def to_tsv(self) -> str:
        lines = ["epoch\tJ\tJ_main\tJ_rule\tvalF1"]
        for r in self.records:
            lines.append(f"{r.epoch}\t{r.J:.10g}\t{r.J_main:.10g}\t{r.J_rule:.10g}\t{r.val_f1:.10g}")
        return "\n".join(lines) + "\n"


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch_index: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index


# --- losses -------------------------------------------------------------------

def bce_loss(p, y):
    """Mean binary cross-entropy and its gradient w.r.t. ``p``."""
    p = np.atleast_1d(np.asarray(p, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    n = p.size
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    grad = (p - y) / (p * (1.0 - p)) / n
    return float(loss), grad


def bce_from_logits(logit, y):
    """Same loss as :func:`bce_loss` evaluated stably from logits."""
    logit = np.asarray(logit, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = logit.size
    loss = np.mean(softplus(logit) - y * logit)
    return float(loss), (sigmoid(logit) - y) / n


def domain_targets(model: ExeFuseModel, tab: EmbeddingTable, facts) -> np.ndarray:
    trip = np.asarray(facts, dtype=np.int64).reshape(-1, 3)
    if len(trip) == 0:
        return np.zeros((0, model.config.d))
    return model.encode_batch(tab, trip, domain=True)[0]


def rule_consistency_loss(model: ExeFuseModel, tab: EmbeddingTable, src, targets, reduction: str = "sum"):
    """``sum ||q_hat(f^g) - target||^2`` and gradients for the encoder and rules.

    ``targets`` are frozen domain-encoder states, so nothing flows into them.
    """
    src = np.asarray(src, dtype=np.int64).reshape(-1, 3)
    if len(src) == 0:
        return 0.0, {}
    q_hat, cache = model.states_batch(tab, src)
    diff = q_hat - targets
    scale = 1.0 if reduction == "sum" else 1.0 / len(src)
    loss = scale * float((diff * diff).sum())
    return loss, model.states_bwd(cache, 2.0 * scale * diff)


def joint_objective(model: ExeFuseModel, tab: EmbeddingTable, trip, labels, src, targets,
                    lam: float, reduction: str = "sum"):
    """``J = J_main + lam * J_rule`` on one batch, with gradients."""
    _, cache = model.forward_batch(tab, trip)
    j_main, d_logit = bce_from_logits(cache["logit"], labels)
    grads = model.backward_batch(cache, d_logit)
    j_rule = 0.0
    if model.uses_rules and len(src):
        j_rule, rgrads = rule_consistency_loss(model, tab, src, targets, reduction)
        for k, g in rgrads.items():
            grads[k] = grads[k] + lam * g
    return j_main + lam * j_rule, grads, (j_main, j_rule)


# --- domain encoder and prototypes -------------------------------------------

def corrupt_batch(trip: np.ndarray, n_entities: int, n_relations: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorised single-slot corruption with the tail/head/relation mix."""
    out = trip.copy()
    u = rng.random(len(trip))
    cum = np.cumsum(CORRUPTION_MIX)
    tail = u < cum[0]
    head = (u >= cum[0]) & (u < cum[1])
    rel = u >= cum[1]
    out[tail, 2] = rng.integers(n_entities, size=int(tail.sum()))
    out[head, 0] = rng.integers(n_entities, size=int(head.sum()))
    out[rel, 1] = rng.integers(n_relations, size=int(rel.sum()))
    return out


def train_domain_encoder(model: ExeFuseModel, tab: EmbeddingTable, vocab: UnifiedVocabulary, seed: int,
                         cfg: DomainEncoderConfig = DomainEncoderConfig()) -> list[float]:
    """Contrastive fine-tuning of the domain encoder on DKG facts.

    Each epoch re-clusters the current DKG encodings; positives are pulled to
    their assigned centroid and corruptions are pushed until their squared
    distance to the nearest centroid exceeds ``margin * tau``.
    """
    enc = model.domain_encoder
    tau = model.config.tau
    pos = np.asarray(vocab.dkg_facts(), dtype=np.int64)
    if len(pos) == 0:
        raise ValueError("DKG has no facts")
    k = min(model.config.n_protos, len(pos))
    x_pos = encoder_input(tab, pos, model.structured)
    params = {"W1": enc.W1, "b1": enc.b1, "W2": enc.W2}
    opt = Adam(params, lr=cfg.lr)
    rng = make_rng(seed, stream=41)
    dkg_set = set(map(tuple, pos.tolist()))
    history = []
    for epoch in range(cfg.epochs):
        q_all = encode_fwd(enc, x_pos)[0]
        cents = kmeans(q_all, k, seed + epoch, max_iter=cfg.kmeans_iter)
        assign = np.argmin(((q_all[:, None, :] - cents[None]) ** 2).sum(-1), axis=1)
        neg = corrupt_batch(pos, vocab.num_entities, vocab.n_dkg_relations, rng)
        keep = np.array([tuple(t) not in dkg_set for t in neg.tolist()])
        neg_all = neg
        x_neg_all = encoder_input(tab, neg_all, model.structured)
        order = rng.permutation(len(pos))
        total = 0.0
        for s in range(0, len(pos), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            n = len(idx)
            qp, cp = encode_fwd(enc, x_pos[idx])
            diff = qp - cents[assign[idx]]
            lp = (diff * diff).sum() / (tau * n)
            dqp = 2.0 * diff / (tau * n)
            nidx = idx[keep[idx]]
            grads: dict = {}
            encode_bwd(enc, cp, dqp, "", grads)
            ln = 0.0
            if len(nidx):
                qn, cn = encode_fwd(enc, x_neg_all[nidx])
                d2 = ((qn[:, None, :] - cents[None]) ** 2).sum(-1)
                j = np.argmin(d2, axis=1)
                slack = cfg.margin - d2[np.arange(len(j)), j] / tau
                active = slack > 0
                ln = float(slack[active].sum()) / n
                dqn = np.where(active[:, None], -2.0 * (qn - cents[j]) / (tau * n), 0.0)
                ng: dict = {}
                encode_bwd(enc, cn, dqn, "", ng)
                for key in grads:
                    grads[key] = grads[key] + ng[key]
            opt.step(params, grads)
            total += (lp + ln) * n
        history.append(total / len(pos))
    return history


def fit_prototypes(model: ExeFuseModel, tab: EmbeddingTable, vocab: UnifiedVocabulary, k: int,
                   tau: float, seed: int) -> PrototypeSet:
    """Cluster domain-encoded DKG facts and freeze log-score statistics."""
    facts = vocab.dkg_facts()
    if len(facts) < k:
        raise ValueError(f"need at least K={k} DKG facts, have {len(facts)}")
    states = domain_targets(model, tab, facts)
    cents = kmeans(states, k, seed)
    if np.allclose(cents, cents[0]):
        log.warning("all %d prototypes coincide; executability scores will be flat", k)
    protos = PrototypeSet(cents, float(tau))
    log_s, _ = ground_fwd(protos, states, "min" if model.ground_kind == "min" else "kde")
    mean = float(log_s.mean())
    std = float(log_s.std())
    if not std > 1e-12:
        log.warning("degenerate log-score spread; using unit std")
        std = 1.0
    protos.mean, protos.std = mean, std
    model.protos = protos
    model.version += 1
    return protos


# --- training -----------------------------------------------------------------

def _arrays(cands: Sequence[LabeledCandidate]):
    trip = np.asarray([c.triple for c in cands], dtype=np.int64).reshape(-1, 3)
    y = np.asarray([c.label for c in cands], dtype=np.float64)
    return trip, y


def f1_at(probs: np.ndarray, labels: np.ndarray, delta: float) -> float:
    pred = probs > delta
    tp = float(np.sum(pred & (labels == 1)))
    fp = float(np.sum(pred & (labels == 0)))
    fn = float(np.sum(~pred & (labels == 1)))
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def pair_arrays(pairs: Sequence[DistantPair], include_inverted: bool = False):
    use = [p for p in pairs if include_inverted or not p.inverted]
    src = np.asarray([p.gkg_fact for p in use], dtype=np.int64).reshape(-1, 3)
    dst = np.asarray([p.dkg_fact for p in use], dtype=np.int64).reshape(-1, 3)
    return src, dst


def train(model: ExeFuseModel, tab: EmbeddingTable, split: DatasetSplit, d_pos: Sequence[DistantPair],
          cfg: TrainConfig, vocab: Optional[UnifiedVocabulary] = None):
    """Adam on ``J_main + lam * J_rule`` with rule batches interleaved 1:1.

    Validation F1 at ``delta`` is tracked each epoch; an epoch improves on the
    best if its F1 is higher, or equal with a lower validation BCE.  Training
    stops after ``patience`` epochs without improvement and the best
    parameters are restored into ``model``.
    """
    if model.uses_exec_score and (model.protos is None or not model.protos.fitted):
        raise ValueError("fit prototypes before training")
    trip, y = _arrays(split.train)
    v_trip, v_y = _arrays(split.valid)
    src, dst = pair_arrays(d_pos)
    targets = domain_targets(model, tab, dst)
    use_rule = model.uses_rules and len(src) > 0
    params = model.trainable()
    opt = Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    rng = make_rng(cfg.seed, stream=31)
    # separate stream so batch order does not depend on whether rule pairs exist
    pair_rng = make_rng(cfg.seed, stream=32)
    report = TrainReport()
    best = model.snapshot()
    best_loss = float("inf")
    stale = 0
    pair_order = pair_rng.permutation(len(src)) if use_rule else np.zeros(0, dtype=np.int64)
    pair_ptr = 0
    train_pos = [c for c in split.train if c.label == 1]
    for epoch in range(cfg.epochs):
        if cfg.resample_negatives and vocab is not None and epoch > 0:
            trip, y = _resampled(train_pos, split.train, vocab, cfg.seed + epoch)
        order = rng.permutation(len(trip))
        main_sum = rule_sum = 0.0
        n_batches = 0
        for bi, s in enumerate(range(0, len(trip), cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            _, cache = model.forward_batch(tab, trip[idx])
            j_main, d_logit = bce_from_logits(cache["logit"], y[idx])
            if not math.isfinite(j_main):
                raise TrainingDiverged(epoch, bi)
            opt.step(params, model.backward_batch(cache, d_logit))
            model.version += 1
            main_sum += j_main
            n_batches += 1
            if use_rule:
                if pair_ptr + cfg.batch_size > len(pair_order):
                    pair_order = pair_rng.permutation(len(src))
                    pair_ptr = 0
                pidx = pair_order[pair_ptr:pair_ptr + cfg.batch_size]
                pair_ptr += cfg.batch_size
                j_rule, rgrads = rule_consistency_loss(model, tab, src[pidx], targets[pidx], cfg.rule_reduction)
                if not math.isfinite(j_rule):
                    raise TrainingDiverged(epoch, bi)
                if cfg.lam > 0:
                    opt.step(params, {k: cfg.lam * g for k, g in rgrads.items()})
                    model.version += 1
                rule_sum += j_rule
        j_main_ep = main_sum / max(n_batches, 1)
        j_rule_ep = rule_sum / max(n_batches, 1) if use_rule else 0.0
        val_f1, val_loss = 0.0, float("inf")
        if len(v_trip):
            v_p, v_cache = model.forward_batch(tab, v_trip)
            val_f1 = f1_at(v_p, v_y, cfg.delta)
            val_loss = bce_from_logits(v_cache["logit"], v_y)[0]
        report.records.append(EpochRecord(epoch, j_main_ep + cfg.lam * j_rule_ep, j_main_ep, j_rule_ep,
                                          val_f1, val_loss))
        if (report.best_epoch < 0 or val_f1 > report.best_f1
                or (val_f1 == report.best_f1 and val_loss < best_loss)):
            report.best_f1, report.best_epoch = val_f1, epoch
            best_loss = val_loss
            best = model.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.restore(best)
    return model, report


LAMBDA_GRID = (0.1, 1.0, 10.0)


def lambda_sweep(build_model, tab: EmbeddingTable, split: DatasetSplit, d_pos: Sequence[DistantPair],
                 cfg: TrainConfig, lams: Sequence[float] = LAMBDA_GRID, vocab: Optional[UnifiedVocabulary] = None):
    """Train a fresh model per ``lam`` value; ``build_model()`` must return an untrained model."""
    out = {}
    for lam in lams:
        _, report = train(build_model(), tab, split, d_pos, replace(cfg, lam=float(lam)), vocab)
        out[float(lam)] = report
    return out


def _resampled(train_pos, train_all, vocab, seed):
    from .dataset import sample_negatives

    existing = {c.triple for c in train_all}
    negs, _ = sample_negatives(train_pos, vocab, 1, seed, exclude=existing)
    return _arrays(list(train_pos) + negs)


def fit_rule_bank(model: ExeFuseModel, x: np.ndarray, y: np.ndarray, epochs: int = 200, lr: float = 1e-2,
                  batch_size: int = 64, seed: int = 0) -> list[float]:
    """Regress executed states onto targets, ``mean ||q_hat(x) - y||^2``; only rules and selector move."""
    params = {k: v for k, v in model.trainable().items() if k.startswith("rule.")}
    if not params:
        raise ValueError(f"variant {model.config.variant!r} has no trainable rules")
    opt = Adam(params, lr=lr)
    rng = make_rng(seed, stream=51)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for s in range(0, len(x), batch_size):
            idx = order[s:s + batch_size]
            q_hat, cache = model.execute_batch(x[idx])
            diff = q_hat - y[idx]
            total += float((diff * diff).sum())
            grads: dict = {}
            model.execute_bwd(cache, 2.0 * diff / len(idx), grads)
            opt.step(params, grads)
        history.append(total / len(x))
    return history


# --- fusion -------------------------------------------------------------------

class FusedFact(NamedTuple):
    triple: Fact
    p: float
    source: Fact
    general_only: bool


def fusion_candidates(vocab: UnifiedVocabulary, gkg_facts=None):
    """Every (source fact, DKG relation) candidate, endpoints mapped through the alignment."""
    facts = np.asarray(vocab.gkg_facts() if gkg_facts is None else gkg_facts, dtype=np.int64).reshape(-1, 3)
    n_rel = vocab.n_dkg_relations
    heads = vocab.endpoint_map[facts[:, 0]]
    tails = vocab.endpoint_map[facts[:, 2]]
    src_idx = np.repeat(np.arange(len(facts)), n_rel)
    rels = np.tile(np.arange(n_rel, dtype=np.int64), len(facts))
    trip = np.stack([heads[src_idx], rels, tails[src_idx]], axis=1)
    legal = ~vocab.in_dkg_batch(trip)
    return facts, src_idx[legal], trip[legal]


def fuse(model: ExeFuseModel, tab: EmbeddingTable, vocab: UnifiedVocabulary, delta: float = 0.5,
         top_m: int = 1, gkg_facts=None) -> list[FusedFact]:
    """Score candidates built from GKG facts and keep those with ``p > delta``.

    At most ``top_m`` triples are kept per source fact; a triple reached from
    several sources is reported once with its highest probability.
    """
    facts, src_idx, trip = fusion_candidates(vocab, gkg_facts)
    probs = model.predict(tab, trip) if len(trip) else np.zeros(0)
    best: dict[Fact, FusedFact] = {}
    keep = np.flatnonzero(probs > delta)
    # stable sort: by source, then descending probability
    keep = keep[np.lexsort((-probs[keep], src_idx[keep]))]
    taken: dict[int, int] = {}
    for i in keep:
        s = int(src_idx[i])
        if taken.get(s, 0) >= top_m:
            continue
        taken[s] = taken.get(s, 0) + 1
        t = Fact(*map(int, trip[i]))
        assert candidate_is_fusable(t, vocab)
        prev = best.get(t)
        if prev is None or probs[i] > prev.p:
            best[t] = FusedFact(t, float(probs[i]), Fact(*map(int, facts[s])), both_endpoints_general(t, vocab))
    return sorted(best.values(), key=lambda f: (-f.p, f.triple))


def config_items(cfg) -> dict:
    return asdict(cfg)
