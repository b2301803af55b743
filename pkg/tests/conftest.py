import numpy as np
import pytest

from exefuse.dataset import SyntheticConfig, generate_synthetic_benchmark
from exefuse.embed import init_table
from exefuse.gradcheck import TINY_MODEL, TINY_WORLD
from exefuse.kg import DOMAIN, GENERAL, KnowledgeGraph, build_unified
from exefuse.model import ModelConfig, init_model
from exefuse.trainer import fit_prototypes

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)


@pytest.fixture
def toy_vocab():
    """3 DKG entities, 4 GKG entities, disjoint names, 2 alignment links."""
    dkg = KnowledgeGraph.from_triples(DOMAIN, [("a'", "q", "b'"), ("b'", "q", "c'")])
    gkg = KnowledgeGraph.from_triples(GENERAL, [("a", "p", "b"), ("c", "p", "d"), ("b", "s", "c")])
    return build_unified(dkg, gkg, [("a", "a'"), ("b", "b'")])


@pytest.fixture(scope="session")
def tiny_bench():
    return generate_synthetic_benchmark(TINY_WORLD, 0)


@pytest.fixture(scope="session")
def small_bench():
    return generate_synthetic_benchmark(SyntheticConfig(n_entities=80, n_relations=6, n_facts=400, n_rules=3), 1)


def tiny_model(vocab, variant="full", seed=0):
    n_rules = 1 if variant == "single_affine" else TINY_MODEL["n_rules"]
    cfg = ModelConfig(**{**TINY_MODEL, "n_rules": n_rules, "variant": variant})
    tab = init_table(vocab.num_entities, vocab.num_relations, cfg.d_emb, seed)
    model = init_model(cfg, seed)
    fit_prototypes(model, tab, vocab, cfg.n_protos, cfg.tau, seed)
    return model, tab


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
