"""Random graphs for tests, benchmarks and demos."""

from __future__ import annotations

import random
from typing import Optional

from cqforge.kg import KnowledgeGraph, Relation, Triple

_VERBS = ("eats", "buys", "sees", "finds", "loses", "makes", "plays", "reads", "takes", "wants")
_OBJECTS = ("cake", "a ticket", "the dog", "a book", "music", "a job", "the car", "some tea", "a gift", "a nap")


def event_text(i: int) -> str:
    """Distinct, readable event text for index ``i``."""
    v = _VERBS[i % len(_VERBS)]
    o = _OBJECTS[(i // len(_VERBS)) % len(_OBJECTS)]
    k = i // (len(_VERBS) * len(_OBJECTS))
    return f"PersonX {v} {o}" + (f" {k}" if k else "")


def random_graph(
    rng: random.Random,
    num_nodes: int,
    num_edges: int,
    relations: Optional[tuple[Relation, ...]] = None,
    scores: bool = True,
) -> KnowledgeGraph:
    """Graph with ``num_nodes`` nodes and up to ``num_edges`` distinct, loop-free
    triples. Plausibilities are uniform in [0, 1] (rounded to 3 places) unless
    ``scores`` is False, in which case every triple scores 1.0."""
    rels = tuple(relations or Relation)
    texts = [event_text(i) for i in range(num_nodes)]
    triples = {}
    if num_nodes >= 2:
        max_edges = num_nodes * (num_nodes - 1) * len(rels)
        target = min(num_edges, max_edges)
        while len(triples) < target:
            h = rng.randrange(num_nodes)
            t = rng.randrange(num_nodes)
            if h == t:
                continue
            r = rng.choice(rels)
            if (h, r, t) not in triples:
                triples[(h, r, t)] = round(rng.random(), 3) if scores else 1.0
    return KnowledgeGraph(texts, [Triple(h, r, t, p) for (h, r, t), p in triples.items()])
