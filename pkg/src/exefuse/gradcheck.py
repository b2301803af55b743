"""Finite-difference check of the joint objective on a tiny model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import SyntheticConfig, build_distant_supervision, generate_synthetic_benchmark
from .embed import init_table
from .model import ModelConfig, init_model
from .numkit import Adam, finite_difference_check
from .trainer import domain_targets, fit_prototypes, joint_objective, pair_arrays

TINY_WORLD = SyntheticConfig(n_entities=50, n_relations=5, n_facts=200, n_rules=2)
TINY_MODEL = dict(d=6, d_emb=8, n_rules=3, n_protos=4, hidden=6)


@dataclass
class GradcheckResult:
    variant: str
    errors: dict[int, float]
    per_param: dict[int, dict[str, float]] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values())


def check_joint_gradient(seed: int, variant: str = "full", steps=(0, 10), lam: float = 1.0,
                         n_cand: int = 12, n_pairs: int = 6, lr: float = 1e-2) -> GradcheckResult:
    """Max relative FD error of ``J_main + lam * J_rule`` after each count in ``steps`` of Adam."""
    bench = generate_synthetic_benchmark(TINY_WORLD, seed)
    vocab = bench.vocab
    n_rules = 1 if variant == "single_affine" else TINY_MODEL["n_rules"]
    cfg = ModelConfig(**{**TINY_MODEL, "n_rules": n_rules, "variant": variant})
    tab = init_table(vocab.num_entities, vocab.num_relations, cfg.d_emb, seed)
    model = init_model(cfg, seed)
    fit_prototypes(model, tab, vocab, cfg.n_protos, cfg.tau, seed)

    cands = bench.gold[:n_cand]
    trip = np.asarray([c.triple for c in cands], dtype=np.int64)
    y = np.asarray([c.label for c in cands], dtype=np.float64)
    src, dst = pair_arrays(build_distant_supervision(vocab)[:n_pairs])
    targets = domain_targets(model, tab, dst)
    params = model.trainable()

    def loss_fn(_params):
        j, grads, _ = joint_objective(model, tab, trip, y, src, targets, lam)
        return j, grads

    opt = Adam(params, lr=lr)
    result = GradcheckResult(variant, {})
    done = 0
    for target_steps in sorted(steps):
        while done < target_steps:
            _, grads = loss_fn(params)
            opt.step(params, grads)
            model.version += 1
            done += 1
        report: dict[str, float] = {}
        result.errors[done] = finite_difference_check(loss_fn, params, report=report)
        result.per_param[done] = report
    return result
