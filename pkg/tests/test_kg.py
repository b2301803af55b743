import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exefuse.kg import (
    DOMAIN,
    GENERAL,
    SAME_AS,
    Fact,
    KGFormatError,
    KnowledgeGraph,
    build_unified,
    candidate_is_fusable,
    contains_fact,
    load_alignment,
    load_triples,
    write_triples,
)


def test_unified_sizes_disjoint_union(toy_vocab):
    assert toy_vocab.num_entities == 3 + 4
    assert len(toy_vocab.alignment) == 2
    # one reserved relation on top of both graphs' relations
    assert toy_vocab.num_relations == 1 + 2 + 1
    assert toy_vocab.relation_names[toy_vocab.same_as] == SAME_AS


def test_empty_alignment_is_valid():
    dkg = KnowledgeGraph.from_triples(DOMAIN, [("x", "q", "y")])
    gkg = KnowledgeGraph.from_triples(GENERAL, [("u", "p", "v")])
    vocab = build_unified(dkg, gkg, [])
    assert vocab.alignment == []
    assert vocab.num_entities == 4


def test_unknown_alignment_name_cites_it_and_the_line():
    dkg = KnowledgeGraph.from_triples(DOMAIN, [("x", "q", "y")])
    gkg = KnowledgeGraph.from_triples(GENERAL, [("u", "p", "v")])
    with pytest.raises(KGFormatError) as err:
        build_unified(dkg, gkg, [("u", "x", 1), ("X", "y", 7)])
    assert "'X'" in str(err.value)
    assert err.value.lineno == 7


def test_name_clash_gets_prefixed_not_merged():
    dkg = KnowledgeGraph.from_triples(DOMAIN, [("paris", "q", "y")])
    gkg = KnowledgeGraph.from_triples(GENERAL, [("paris", "p", "v")])
    vocab = build_unified(dkg, gkg, [])
    assert "dkg:paris" in vocab.entity_names and "gkg:paris" in vocab.entity_names
    assert vocab.num_entities == 4


def test_fusable_rejects_existing_dkg_fact(toy_vocab):
    f = toy_vocab.resolve("a'", "q", "b'")
    assert not candidate_is_fusable(f, toy_vocab)


def test_fusable_rejects_general_relation(toy_vocab):
    t = (toy_vocab.entity_id("a"), toy_vocab.relation_id("p"), toy_vocab.entity_id("b'"))
    assert not candidate_is_fusable(t, toy_vocab)


def test_fusable_accepts_new_mixed_triple(toy_vocab):
    t = (toy_vocab.entity_id("c"), toy_vocab.relation_id("q"), toy_vocab.entity_id("a'"))
    assert candidate_is_fusable(t, toy_vocab)


def test_fusable_rejects_same_as(toy_vocab):
    t = (toy_vocab.entity_id("a"), toy_vocab.same_as, toy_vocab.entity_id("a'"))
    assert not candidate_is_fusable(t, toy_vocab)


def test_contains_fact():
    g = KnowledgeGraph.from_triples(DOMAIN, [("x", "q", "y"), ("x", "r", "z")])
    assert contains_fact(g, Fact(0, 0, 1))
    assert not contains_fact(g, Fact(0, 1, 1))
    assert not contains_fact(KnowledgeGraph(DOMAIN), Fact(0, 0, 1))


def test_duplicate_facts_stored_once():
    g = KnowledgeGraph(GENERAL)
    assert g.add_fact("a", "p", "b")
    assert not g.add_fact("a", "p", "b")
    assert len(g) == 1
    g.validate()


def test_loader_skips_comments_and_drops_extra_columns(tmp_path):
    p = tmp_path / "g.tsv"
    p.write_text("# header\na\tp\tb\t2014-01-01\n\n  # indented comment\nb\tp\tc\n", encoding="utf-8")
    g = load_triples(p, GENERAL)
    assert g.entities == ["a", "b", "c"]
    assert len(g) == 2


def test_loader_reports_short_line(tmp_path):
    p = tmp_path / "g.tsv"
    p.write_text("a\tp\tb\na\tp\n", encoding="utf-8")
    with pytest.raises(KGFormatError) as err:
        load_triples(p, GENERAL)
    assert err.value.lineno == 2


def test_alignment_loader_keeps_line_numbers(tmp_path):
    p = tmp_path / "al.tsv"
    p.write_text("# g\td\nu\tx\n\nv\ty\n", encoding="utf-8")
    assert load_alignment(p) == [("u", "x", 2), ("v", "y", 4)]


names = st.text(alphabet="abcdefgh", min_size=1, max_size=3)
triples = st.lists(st.tuples(names, st.sampled_from(["p", "q", "r"]), names), min_size=1, max_size=30)


@settings(max_examples=40, deadline=None)
@given(triples)
def test_round_trip_preserves_ids_and_facts(tmp_path_factory, rows):
    g = KnowledgeGraph.from_triples(GENERAL, rows)
    path = tmp_path_factory.mktemp("rt") / "g.tsv"
    write_triples(g, path)
    h = load_triples(path, GENERAL)
    assert h.entities == g.entities
    assert h.relations == g.relations
    assert h.facts == g.facts
    for name in g.entities:
        assert g.entities[g.entity_id(name)] == name


@settings(max_examples=40, deadline=None)
@given(triples, triples)
def test_unified_size_is_sum_for_disjoint_names(drows, grows):
    dkg = KnowledgeGraph.from_triples(DOMAIN, [(h.upper(), r, t.upper()) for h, r, t in drows])
    gkg = KnowledgeGraph.from_triples(GENERAL, grows)
    vocab = build_unified(dkg, gkg, [])
    assert vocab.num_entities == dkg.num_entities + gkg.num_entities
    for f in vocab.gkg_facts():
        assert vocab.is_gkg_entity(f.head) and vocab.is_gkg_entity(f.tail)


def test_batched_membership_matches_scalar(tiny_bench, rng):
    vocab = tiny_bench.vocab
    dkg = list(vocab.dkg_facts())
    trip = [tuple(f) for f in dkg[:50]]
    trip += [tuple(int(x) for x in row) for row in
             zip(rng.integers(vocab.num_entities, size=200), rng.integers(vocab.num_relations, size=200),
                 rng.integers(vocab.num_entities, size=200))]
    batched = vocab.in_dkg_batch(trip)
    assert batched.tolist() == [vocab.in_dkg(t) for t in trip]
    assert batched[:50].all()


def test_endpoint_map_matches_scalar(tiny_bench):
    vocab = tiny_bench.vocab
    assert vocab.endpoint_map.tolist() == [vocab.endpoint(e) for e in range(vocab.num_entities)]
