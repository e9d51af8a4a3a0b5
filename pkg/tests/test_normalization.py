import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cqforge.kg import Relation, graph_stats
from cqforge.normalization import (
    EmbeddingFileProvider,
    HttpEmbeddingProvider,
    ProviderError,
    SimilarityProvider,
    TokenJaccardProvider,
    UnionFind,
    blocking_candidates,
    merge_nodes,
    normalize_graph,
    normalize_tail,
    subject_for,
)
from cqforge._http import TransportError
from cqforge.synth import random_graph

from conftest import DATA, graph_of


def rule_cases():
    for line in (DATA / "normalization_cases.tsv").read_text(encoding="utf-8").splitlines():
        if line and not line.startswith("#"):
            yield tuple(line.split("\t"))


RULE_CASES = list(rule_cases())


def test_rule_fixture_has_twelve_cases():
    assert len(RULE_CASES) == 12
    assert {Relation.parse(r) for _, r, _ in RULE_CASES} >= set(Relation) - {Relation.isBefore}


@pytest.mark.parametrize("tail,rel,expected", RULE_CASES)
def test_rule_table(tail, rel, expected):
    r = Relation.parse(rel)
    assert normalize_tail(tail, r, subject_for(r)) == expected


def test_rule_examples():
    assert normalize_tail("to say sorry", Relation.xWant, "PersonX") == "PersonX say sorry"
    assert normalize_tail("brave", Relation.xAttr, "PersonX") == "PersonX is brave"
    assert normalize_tail("PersonX buys a ticket", Relation.xEffect) == "PersonX buys a ticket"


def test_only_one_leading_to_removed():
    assert normalize_tail("to to the store", Relation.xWant) == "PersonX to the store"
    assert normalize_tail("tomorrow", Relation.xWant) == "PersonX tomorrow"


def test_normalize_graph_merges_identical_rewrites():
    g = graph_of(
        ("PersonX apologizes", "xWant", "to say sorry"),
        ("PersonX is rude", "xWant", "PersonX say sorry"),
    )
    out, rep = normalize_graph(g)
    assert out.num_nodes == 3
    assert rep.nodes_before == 4 and rep.nodes_after == 3
    assert rep.tails_rewritten == 1
    assert "PersonX say sorry" in out


def test_normalize_graph_drops_created_self_loops():
    g = graph_of(("PersonX is happy", "xReact", "happy"))
    out, _ = normalize_graph(g)
    assert out.num_triples == 0


def test_buys_a_ticket_pair_merges():
    g = graph_of(
        ("PersonX buys a ticket", "xWant", "to see the show"),
        ("PersonX buys a ticket .", "xEffect", "PersonX pays"),
        ("PersonX saves up", "isBefore", "PersonX buys a ticket ."),
    )
    out, mm = merge_nodes(g, TokenJaccardProvider(), 0.95)
    assert mm.merged_count == 1
    assert mm.groups == [[0, 2]]
    # "buys a ticket ." has degree 2 against 1, so it represents the pair
    assert "PersonX buys a ticket ." in out and "PersonX buys a ticket" not in out
    assert out.num_triples == 3


def test_tau_one_with_injective_provider_merges_nothing():
    g = random_graph(random.Random(0), 50, 120)
    out, mm = merge_nodes(g, TokenJaccardProvider(), 1.0)
    assert mm.merged_count == 0
    assert out.texts == g.texts
    assert out.triples == g.triples


def three_similar_fixture():
    # "PersonX eats ." has degree 2; the other two variants have degree 1
    return graph_of(
        ("PersonX eats .", "xWant", "B"),
        ("PersonX eats .", "xEffect", "C"),
        ("PersonX eats", "xWant", "B"),
        ("PersonX eats !", "xReact", "D"),
    )


def test_three_way_merge_hand_computed():
    g = three_similar_fixture()
    out, mm = merge_nodes(g, TokenJaccardProvider(), 0.95)
    eats = g.node_id("PersonX eats .")
    assert {mm.rep(g.node_id(t)) for t in ("PersonX eats .", "PersonX eats", "PersonX eats !")} == {eats}
    assert (mm.nodes_before, mm.nodes_after, mm.merged_count) == (6, 4, 2)
    assert mm.merged_fraction == pytest.approx(2 / 6)
    # 4 edges on 6 nodes before; the two xWant edges to B collapse, leaving 3 on 4
    assert mm.degree_before == pytest.approx(8 / 6)
    assert mm.degree_after == pytest.approx(6 / 4)
    assert mm.degree_increase == pytest.approx((1.5 - 8 / 6) / (8 / 6))
    assert mm.collapsed_edges == 1 and mm.dropped_self_loops == 0
    assert sorted((h, r.value, t) for h, r, t, _ in out.text_triples()) == [
        ("PersonX eats .", "xEffect", "C"),
        ("PersonX eats .", "xReact", "D"),
        ("PersonX eats .", "xWant", "B"),
    ]


def test_merge_drops_self_loops():
    g = graph_of(("PersonX runs", "isBefore", "PersonX runs ."), ("PersonX runs", "xWant", "rest"))
    out, mm = merge_nodes(g, TokenJaccardProvider(), 0.95)
    assert mm.dropped_self_loops == 1
    assert out.num_triples == 1


def test_merge_keeps_highest_score_on_collapse():
    g = graph_of(("A x", "xWant", "B", 0.2), ("A x .", "xWant", "B", 0.9))
    out, _ = merge_nodes(g, TokenJaccardProvider(), 0.95)
    (tr,) = out.triples
    assert tr.plausibility == 0.9


class VectorProvider(SimilarityProvider):
    def __init__(self, table):
        self.table = table

    def embed(self, texts):
        return np.array([self.table[t] for t in texts], dtype=float)


def test_transitive_closure():
    # a~b and b~c but a and c are below threshold: one group anyway
    a = [1.0, 0.0]
    b = [np.cos(0.25), np.sin(0.25)]
    c = [np.cos(0.5), np.sin(0.5)]
    sim = VectorProvider({"a": a, "b": b, "c": c, "z": [0.0, 1.0]})
    assert sim.similarity("a", "c") < 0.95 <= sim.similarity("a", "b")
    g = graph_of(("a", "xWant", "z"), ("b", "xWant", "z"), ("c", "xNeed", "z"))
    out, mm = merge_nodes(g, sim, 0.95)
    assert mm.groups == [[0, 2, 3]]
    assert out.num_nodes == 2


def test_representative_tie_goes_to_smallest_id():
    g = graph_of(("k m", "xWant", "B"), ("k m .", "xNeed", "C"))
    _, mm = merge_nodes(g, TokenJaccardProvider(), 0.95)
    assert mm.rep(g.node_id("k m .")) == g.node_id("k m")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.integers(2, 60), st.integers(0, 150), st.sampled_from([0.3, 0.5, 0.8, 0.95]))
def test_merge_invariants(seed, n, m, tau):
    rng = random.Random(seed)
    # a small vocabulary makes near-duplicates common
    words = ["eat", "cake", "run", "home", "read"]
    texts = sorted({" ".join(rng.sample(words, rng.randint(1, 3))) for _ in range(n)})
    triples = set()
    for _ in range(m):
        h, t = rng.sample(texts, 2) if len(texts) > 1 else (texts[0], texts[0])
        if h != t:
            triples.add((h, rng.choice(list(Relation)), t))
    g = graph_of(*triples) if triples else graph_of()
    sim = TokenJaccardProvider()
    out, mm = merge_nodes(g, sim, tau)

    # representative map is idempotent
    assert all(mm.rep(mm.rep(x)) == mm.rep(x) for x in range(g.num_nodes))
    # no two survivors reach tau
    survivors = out.texts
    for i in range(len(survivors)):
        for j in range(i + 1, len(survivors)):
            assert sim.similarity(survivors[i], survivors[j]) < tau
    # every input triple maps onto a surviving triple or a dropped self-loop
    mapped = set()
    loops = 0
    for h, r, t, _ in g.triples:
        nh, nt = mm.new_id[h], mm.new_id[t]
        if nh == nt:
            loops += 1
        else:
            assert out.has_edge(nh, r, nt)
            mapped.add((nh, r, nt))
    assert len(mapped) == out.num_triples
    assert loops == mm.dropped_self_loops
    assert g.num_triples == out.num_triples + mm.dropped_self_loops + mm.collapsed_edges
    # reported stats match a fresh computation
    assert mm.degree_before == graph_stats(g).mean_degree
    assert mm.degree_after == graph_stats(out).mean_degree
    assert mm.merged_count == g.num_nodes - out.num_nodes


def test_blocking_matches_exact_on_small_graph():
    g = random_graph(random.Random(5), 120, 300)
    texts = list(g.texts) + ["PersonX eats cake ."]
    sim = TokenJaccardProvider()
    exact = sim.pairs_above(texts, 0.95)
    blocked = sim.pairs_above(texts, 0.95, blocking_candidates(texts))
    assert exact == blocked and exact


def test_union_find_groups():
    uf = UnionFind(5)
    uf.union(3, 1)
    uf.union(1, 4)
    assert uf.groups() == {0: [0], 1: [1, 3, 4], 2: [2]}


def test_similarity_self_and_symmetry():
    sim = VectorProvider({"a": [0.3, 0.4, 0.1], "b": [0.9, -0.2, 0.5]})
    assert sim.similarity("a", "a") == pytest.approx(1.0, abs=1e-6)
    assert sim.similarity("a", "b") == pytest.approx(sim.similarity("b", "a"))


def test_embedding_file_provider(tmp_path):
    p = tmp_path / "emb.tsv"
    p.write_text("PersonX buys a ticket\t1,0,0\nPersonX buys a ticket .\t0.999,0.01,0\nB\t0,1,0\n")
    prov = EmbeddingFileProvider(p)
    g = graph_of(("PersonX buys a ticket", "xWant", "B"), ("PersonX buys a ticket .", "xWant", "B"))
    out, mm = merge_nodes(g, prov, 0.95)
    assert mm.merged_count == 1 and out.num_triples == 1


def test_embedding_file_missing_text(tmp_path):
    p = tmp_path / "emb.tsv"
    p.write_text("A\t1,0\n")
    g = graph_of(("A", "xWant", "B"))
    with pytest.raises(ProviderError, match="'B'"):
        merge_nodes(g, EmbeddingFileProvider(p), 0.95)
    out, mm = merge_nodes(g, EmbeddingFileProvider(p, missing="skip"), 0.95)
    assert mm.merged_count == 0


def test_http_embedding_provider(json_server):
    vectors = {"A": [1, 0], "A .": [1, 0.01], "B": [0, 1]}
    srv = json_server(lambda body: (200, {"vectors": [vectors[t] for t in body["texts"]]}))
    g = graph_of(("A", "xWant", "B"), ("A .", "xNeed", "B"))
    out, mm = merge_nodes(g, HttpEmbeddingProvider(srv.url), 0.95)
    assert mm.merged_count == 1
    assert srv.requests[0] == {"texts": ["A", "B", "A ."]}


def test_http_embedding_errors(json_server):
    bad = json_server(lambda body: (200, {"vectors": []}))
    with pytest.raises(ProviderError):
        HttpEmbeddingProvider(bad.url).embed(["x"])
    down = json_server(lambda body: (500, {}))
    with pytest.raises(TransportError):
        HttpEmbeddingProvider(down.url).embed(["x"])
