import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import tiny_model
from exefuse.dataset import build_distant_supervision, split_dataset
from exefuse.embed import PretrainConfig, pretrain_translational
from exefuse.kg import candidate_is_fusable
from exefuse.model import ModelConfig, executability_score, init_model
from exefuse.numkit import finite_difference_check
from exefuse.pipeline import PipelineConfig, prepare_model
from exefuse.trainer import (
    LAMBDA_GRID,
    DomainEncoderConfig,
    TrainConfig,
    TrainingDiverged,
    bce_from_logits,
    bce_loss,
    corrupt_batch,
    domain_targets,
    fit_prototypes,
    fit_rule_bank,
    fuse,
    joint_objective,
    lambda_sweep,
    pair_arrays,
    rule_consistency_loss,
    train,
    train_domain_encoder,
)

SMALL_MODEL = ModelConfig(d=8, d_emb=8, n_rules=4, n_protos=8, hidden=8)
QUICK = TrainConfig(epochs=4, lr=1e-2, batch_size=32, patience=10)


@pytest.fixture(scope="module")
def setup(small_bench):
    vocab = small_bench.vocab
    tab = pretrain_translational(vocab, PretrainConfig(d_emb=8, epochs=20, lr=0.05), 0)
    split = split_dataset(small_bench.gold, "s1", 0)
    pairs = build_distant_supervision(vocab)
    return vocab, tab, split, pairs


def fresh(vocab, tab, seed=0, variant="full"):
    cfg = PipelineConfig(model=replace(SMALL_MODEL, variant=variant), domain=DomainEncoderConfig(epochs=3), seed=seed)
    return prepare_model(vocab, tab, cfg)


# --- losses -------------------------------------------------------------------

@pytest.mark.parametrize("y", [0, 1])
def test_bce_at_half_is_ln2(y):
    assert bce_loss(0.5, y)[0] == pytest.approx(math.log(2.0), abs=1e-12)
    assert abs(math.log(2.0) - 0.693147) < 1e-6


def test_bce_vanishes_at_the_label():
    assert bce_loss(1 - 1e-12, 1)[0] < 1e-11
    assert bce_loss(1e-12, 0)[0] < 1e-11


def test_bce_batch_mean_and_logit_form():
    p, y = np.array([0.2, 0.9]), np.array([1, 0])
    both, _ = bce_loss(p, y)
    assert both == pytest.approx((bce_loss(0.2, 1)[0] + bce_loss(0.9, 0)[0]) / 2, abs=1e-15)
    logit = np.log(p / (1 - p))
    assert bce_from_logits(logit, y)[0] == pytest.approx(both, abs=1e-12)


def test_bce_gradient_and_domain():
    p, y = np.array([0.3, 0.6, 0.8]), np.array([1.0, 0.0, 1.0])
    _, g = bce_loss(p, y)
    h = 1e-7
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        num = (bce_loss(p + e, y)[0] - bce_loss(p - e, y)[0]) / (2 * h)
        assert g[i] == pytest.approx(num, rel=1e-6)
    for bad in (0.0, 1.0, 1.2):
        with pytest.raises(ValueError):
            bce_loss(bad, 1)


def test_rule_loss_zero_on_target_and_offset_norm(tiny_bench):
    model, tab = tiny_model(tiny_bench.vocab)
    src = np.array([tiny_bench.gkg.facts[0]]) + [tiny_bench.vocab.n_dkg_entities, tiny_bench.vocab.n_dkg_relations,
                                                 tiny_bench.vocab.n_dkg_entities]
    q_hat, _ = model.states_batch(tab, src)
    assert rule_consistency_loss(model, tab, src, q_hat)[0] == 0.0
    v = np.arange(model.config.d, dtype=float)[None, :]
    assert rule_consistency_loss(model, tab, src, q_hat - v)[0] == pytest.approx(float((v * v).sum()), rel=1e-12)
    assert rule_consistency_loss(model, tab, np.zeros((0, 3)), np.zeros((0, 6)))[0] == 0.0


def test_rule_loss_gradient_reaches_encoder_and_rules_only(tiny_bench):
    vocab = tiny_bench.vocab
    model, tab = tiny_model(vocab)
    src, dst = pair_arrays(build_distant_supervision(vocab)[:5])
    targets = domain_targets(model, tab, dst)
    params = model.trainable()
    loss_fn = lambda _: rule_consistency_loss(model, tab, src, targets)
    _, grads = loss_fn(params)
    assert set(grads) == {k for k in params if k.startswith(("enc.", "rule."))}
    assert finite_difference_check(loss_fn, params) < 1e-4


def test_joint_objective_lambda_behaviour(tiny_bench):
    vocab = tiny_bench.vocab
    model, tab = tiny_model(vocab)
    trip = np.array([c.triple for c in tiny_bench.gold[:8]])
    y = np.array([c.label for c in tiny_bench.gold[:8]], dtype=float)
    src, dst = pair_arrays(build_distant_supervision(vocab)[:4])
    targets = domain_targets(model, tab, dst)
    j0, g0, (jm0, jr0) = joint_objective(model, tab, trip, y, src, targets, 0.0)
    j1, _, (jm1, jr1) = joint_objective(model, tab, trip, y, src, targets, 1.0)
    j2, _, _ = joint_objective(model, tab, trip, y, src, targets, 2.0)
    assert jr0 > 0 and j0 == jm0 >= 0
    assert (j2 - jm1) == pytest.approx(2 * (j1 - jm1), rel=1e-12)
    # with lambda = 0 the rule term is recorded but contributes no gradient
    _, cache = model.forward_batch(tab, trip)
    pure = model.backward_batch(cache, bce_from_logits(cache["logit"], y)[1])
    for k in pure:
        np.testing.assert_array_equal(g0[k], pure[k])


def test_corrupt_batch_changes_exactly_one_slot_or_none(rng):
    trip = np.tile([[1, 2, 3]], (200, 1))
    out = corrupt_batch(trip, 50, 5, rng)
    assert np.all((out != trip).sum(1) <= 1)


# --- domain side --------------------------------------------------------------

def test_prototypes_at_k_equal_facts_are_the_encodings(tiny_bench):
    vocab = tiny_bench.vocab
    model, tab = tiny_model(vocab)
    n = len(vocab.dkg_facts())
    protos = fit_prototypes(model, tab, vocab, n, 1.0, 0)
    states = domain_targets(model, tab, vocab.dkg_facts())
    assert sorted(map(tuple, protos.centroids.round(10))) == sorted(map(tuple, states.round(10)))
    with pytest.raises(ValueError):
        fit_prototypes(model, tab, vocab, n + 1, 1.0, 0)


def test_prototype_refit_is_identical(tiny_bench):
    model, tab = tiny_model(tiny_bench.vocab)
    a = fit_prototypes(model, tab, tiny_bench.vocab, 4, 1.0, 5)
    b = fit_prototypes(model, tab, tiny_bench.vocab, 4, 1.0, 5)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    assert (a.mean, a.std, a.tau) == (b.mean, b.std, b.tau)


def test_dkg_facts_score_above_their_corruptions(setup):
    vocab, tab, _, _ = setup
    model = fresh(vocab, tab)
    facts = np.array(vocab.dkg_facts())
    dkg = set(map(tuple, facts.tolist()))
    neg = corrupt_batch(facts, vocab.num_entities, vocab.n_dkg_relations, np.random.default_rng(0))
    neg = neg[[tuple(t) not in dkg for t in neg.tolist()]]
    s_pos = [executability_score(model.protos, q) for q in domain_targets(model, tab, facts)]
    s_neg = [executability_score(model.protos, q) for q in domain_targets(model, tab, neg)]
    assert np.mean(s_pos) > np.mean(s_neg)


def test_domain_encoder_loss_goes_down(setup):
    vocab, tab, _, _ = setup
    model = init_model(SMALL_MODEL, 0)
    hist = train_domain_encoder(model, tab, vocab, 0, DomainEncoderConfig(epochs=6))
    assert hist[-1] < hist[0]


def test_warm_start_copies_values_not_storage(setup):
    vocab, tab, _, _ = setup
    model = fresh(vocab, tab)
    np.testing.assert_array_equal(model.encoder.W1, model.domain_encoder.W1)
    assert not np.shares_memory(model.encoder.W1, model.domain_encoder.W1)


# --- training -----------------------------------------------------------------

def test_training_is_deterministic_and_report_consistent(setup):
    vocab, tab, split, pairs = setup
    _, a = train(fresh(vocab, tab), tab, split, pairs, QUICK, vocab)
    m, b = train(fresh(vocab, tab), tab, split, pairs, QUICK, vocab)
    assert a.records == b.records
    assert a.best_f1 == max(r.val_f1 for r in a.records)
    assert [r.epoch for r in a.records] == list(range(len(a.records)))
    for r in a.records:
        assert r.J >= 0 and r.J == pytest.approx(r.J_main + QUICK.lam * r.J_rule)
    assert a.to_tsv().splitlines()[0] == "epoch\tJ\tJ_main\tJ_rule\tvalF1"


def test_best_snapshot_is_restored(setup):
    vocab, tab, split, pairs = setup
    from exefuse.trainer import f1_at

    model, rep = train(fresh(vocab, tab), tab, split, pairs, QUICK, vocab)
    v_trip = np.array([c.triple for c in split.valid])
    v_y = np.array([c.label for c in split.valid])
    assert f1_at(model.predict(tab, v_trip), v_y, QUICK.delta) == rep.best_f1


def test_lambda_zero_equals_pure_bce_run(setup):
    vocab, tab, split, pairs = setup
    cfg = replace(QUICK, lam=0.0)
    m0, r0 = train(fresh(vocab, tab), tab, split, pairs, cfg, vocab)
    m1, r1 = train(fresh(vocab, tab), tab, split, [], cfg, vocab)
    assert [r.J_rule for r in r0.records][0] > 0
    assert [r.J_main for r in r0.records] == [r.J_main for r in r1.records]
    for k, v in m0.trainable().items():
        np.testing.assert_array_equal(v, m1.trainable()[k])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts_with_batch_index(setup):
    vocab, tab, split, pairs = setup
    bad = replace(tab, entity_rows=tab.entity_rows.copy())
    bad.entity_rows[:] = np.nan
    with pytest.raises(TrainingDiverged) as err:
        train(fresh(vocab, tab), bad, split, pairs, QUICK, vocab)
    assert err.value.batch_index == 0 and err.value.epoch == 0


def test_training_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(delta=1.0)


def test_lambda_sweep_covers_the_grid(setup):
    vocab, tab, split, pairs = setup
    reports = lambda_sweep(lambda: fresh(vocab, tab), tab, split, pairs, replace(QUICK, epochs=1), vocab=vocab)
    assert sorted(reports) == sorted(LAMBDA_GRID)


def test_resampled_negatives_still_train(setup):
    vocab, tab, split, pairs = setup
    _, rep = train(fresh(vocab, tab), tab, split, pairs, replace(QUICK, epochs=2, resample_negatives=True), vocab)
    assert len(rep.records) == 2


def test_rule_bank_regression_reduces_error(rng):
    model = init_model(ModelConfig(d=4, n_rules=4), 0)
    x = rng.normal(size=(256, 4))
    y = 2.0 * x + 1.0
    hist = fit_rule_bank(model, x, y, epochs=50)
    assert hist[-1] < 0.1 * hist[0]


# --- fusion -------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(setup):
    vocab, tab, split, pairs = setup
    model, _ = train(fresh(vocab, tab), tab, split, pairs, replace(QUICK, epochs=3), vocab)
    return vocab, tab, model


def test_fuse_threshold_one_is_empty(trained):
    vocab, tab, model = trained
    assert fuse(model, tab, vocab, delta=1.0) == []


def test_fused_triples_are_legal_and_capped(trained):
    vocab, tab, model = trained
    out = fuse(model, tab, vocab, delta=0.1, top_m=2)
    assert out
    per_source = {}
    for f in out:
        assert candidate_is_fusable(f.triple, vocab)
        assert f.p > 0.1
        per_source[f.source] = per_source.get(f.source, 0) + 1
    assert max(per_source.values()) <= 2
    assert len({f.triple for f in out}) == len(out)
