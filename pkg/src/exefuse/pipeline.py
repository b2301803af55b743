"""End-to-end assembly: pretrain, fit the domain side, train, all from one seed."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .dataset import (
    DatasetSplit,
    DistantPair,
    LabeledCandidate,
    build_distant_supervision,
    split_dataset,
)
from .embed import EmbeddingTable, PretrainConfig, pretrain_translational
from .kg import UnifiedVocabulary
from .model import ExeFuseModel, ModelConfig, init_model
from .trainer import (
    DomainEncoderConfig,
    TrainConfig,
    TrainReport,
    fit_prototypes,
    train,
    train_domain_encoder,
)

log = logging.getLogger(__name__)

# fixed offsets from the run seed
SEED_PRETRAIN, SEED_INIT, SEED_DOMAIN, SEED_PROTOS, SEED_TRAIN = 0, 1, 2, 3, 4


@dataclass(frozen=True)
class PipelineConfig:
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    domain: DomainEncoderConfig = field(default_factory=DomainEncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scheme: str = "s1"
    seed: int = 0
    warm_start: bool = True

    def with_variant(self, variant: str) -> "PipelineConfig":
        n_rules = 1 if variant == "single_affine" else self.model.n_rules
        return replace(self, model=replace(self.model, variant=variant, n_rules=n_rules))


@dataclass
class PipelineResult:
    model: ExeFuseModel
    table: EmbeddingTable
    split: DatasetSplit
    pairs: list[DistantPair]
    report: TrainReport


def pretrain(vocab: UnifiedVocabulary, cfg: PipelineConfig) -> EmbeddingTable:
    pc = replace(cfg.pretrain, d_emb=cfg.model.d_emb)
    return pretrain_translational(vocab, pc, cfg.seed + SEED_PRETRAIN)


def prepare_model(vocab: UnifiedVocabulary, tab: EmbeddingTable, cfg: PipelineConfig) -> ExeFuseModel:
    """Initialise, fine-tune and freeze the domain encoder, fit prototypes.

    With ``warm_start`` the source encoder starts from the tuned domain
    encoder's values (the two never share storage afterwards).
    """
    model = init_model(cfg.model, cfg.seed + SEED_INIT)
    train_domain_encoder(model, tab, vocab, cfg.seed + SEED_DOMAIN, cfg.domain)
    if cfg.warm_start:
        model.encoder.W1[...] = model.domain_encoder.W1
        model.encoder.b1[...] = model.domain_encoder.b1
        model.encoder.W2[...] = model.domain_encoder.W2
    fit_prototypes(model, tab, vocab, cfg.model.n_protos, cfg.model.tau, cfg.seed + SEED_PROTOS)
    return model


def run_pipeline(
    vocab: UnifiedVocabulary,
    candidates: Sequence[LabeledCandidate],
    cfg: PipelineConfig,
    table: Optional[EmbeddingTable] = None,
    split: Optional[DatasetSplit] = None,
    pairs: Optional[list[DistantPair]] = None,
) -> PipelineResult:
    tab = table if table is not None else pretrain(vocab, cfg)
    if split is None:
        split = split_dataset(candidates, cfg.scheme, cfg.seed)
    if pairs is None:
        pairs = build_distant_supervision(vocab)
    model = prepare_model(vocab, tab, cfg)
    tcfg = replace(cfg.train, seed=cfg.seed + SEED_TRAIN)
    model, report = train(model, tab, split, pairs, tcfg, vocab)
    return PipelineResult(model, tab, split, pairs, report)
