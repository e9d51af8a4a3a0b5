"""Conjunctive query structures, backward sampling, and exact answering.

A query is a small DAG over anchor nodes (grounded), existential variables
and one answer variable ``?``. Each edge carries a relation slot; slot order
is the index into ``QueryInstance.relations``:

    1p      a0 -r0-> ?
    2p      a0 -r0-> e0 -r1-> ?
    2i      a0 -r0-> ?,  a1 -r1-> ?
    2i-neg  as 2i, with r1 = HinderedBy
    3i      a0 -r0-> ?,  a1 -r1-> ?,  a2 -r2-> ?
    ip      a0 -r0-> e0, a1 -r1-> e0, e0 -r2-> ?
    pi      a0 -r0-> e0 -r1-> ?,  a1 -r2-> ?
"""

from __future__ import annotations

import enum
import hashlib
import itertools
import logging
import random
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from cqforge.kg import RELATION_INDEX, KnowledgeGraph, Predecessor, Relation

logger = logging.getLogger(__name__)

ANSWER = "?"


class QueryKind(str, enum.Enum):
    OneP = "1p"
    TwoP = "2p"
    TwoI = "2i"
    TwoINeg = "2i-neg"
    ThreeI = "3i"
    IP = "ip"
    PI = "pi"

    @classmethod
    def parse(cls, name: str) -> "QueryKind":
        key = name.strip()
        for k in cls:
            if key in (k.value, k.name):
                return k
        raise ValueError(f"unknown query kind {name!r}")

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class QueryStructure:
    kind: QueryKind
    anchors: tuple[str, ...]
    existentials: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]
    # slots whose relation is fixed to HinderedBy
    negated_slots: tuple[int, ...] = ()
    # groups of slots that are interchangeable (canonicalized by sorting)
    symmetric: tuple[tuple[int, ...], ...] = ()

    @property
    def variables(self) -> tuple[str, ...]:
        """Existentials then the answer: a valid leaves-to-root evaluation order."""
        return self.existentials + (ANSWER,)

    def incoming(self, var: str) -> list[int]:
        return [i for i, (_, dst) in enumerate(self.edges) if dst == var]

    @property
    def num_relations(self) -> int:
        return len(self.edges)


STRUCTURES: dict[QueryKind, QueryStructure] = {
    QueryKind.OneP: QueryStructure(QueryKind.OneP, ("a0",), (), (("a0", ANSWER),)),
    QueryKind.TwoP: QueryStructure(QueryKind.TwoP, ("a0",), ("e0",), (("a0", "e0"), ("e0", ANSWER))),
    QueryKind.TwoI: QueryStructure(
        QueryKind.TwoI, ("a0", "a1"), (), (("a0", ANSWER), ("a1", ANSWER)), symmetric=((0, 1),)
    ),
    QueryKind.TwoINeg: QueryStructure(
        QueryKind.TwoINeg, ("a0", "a1"), (), (("a0", ANSWER), ("a1", ANSWER)), negated_slots=(1,)
    ),
    QueryKind.ThreeI: QueryStructure(
        QueryKind.ThreeI, ("a0", "a1", "a2"), (), (("a0", ANSWER), ("a1", ANSWER), ("a2", ANSWER)),
        symmetric=((0, 1, 2),),
    ),
    QueryKind.IP: QueryStructure(
        QueryKind.IP, ("a0", "a1"), ("e0",), (("a0", "e0"), ("a1", "e0"), ("e0", ANSWER)), symmetric=((0, 1),)
    ),
    QueryKind.PI: QueryStructure(
        QueryKind.PI, ("a0", "a1"), ("e0",), (("a0", "e0"), ("e0", ANSWER), ("a1", ANSWER))
    ),
}


def structure(kind: QueryKind) -> QueryStructure:
    return STRUCTURES[kind]


class MalformedQueryError(ValueError):
    pass


@dataclass(frozen=True)
class QueryInstance:
    """A grounded query. ``witness`` holds the existential bindings found while
    sampling; together with ``seed_answer`` they name the triples the query was
    built from."""

    kind: QueryKind
    anchors: tuple[int, ...]
    relations: tuple[Relation, ...]
    seed_answer: int
    witness: tuple[int, ...] = ()

    def __post_init__(self):
        st = STRUCTURES[self.kind]
        if len(self.anchors) != len(st.anchors) or len(self.relations) != st.num_relations:
            raise MalformedQueryError(f"{self.kind}: wrong anchor or relation count")
        if self.witness and len(self.witness) != len(st.existentials):
            raise MalformedQueryError(f"{self.kind}: wrong witness length")
        for i, r in enumerate(self.relations):
            if (i in st.negated_slots) != (r is Relation.HinderedBy) and self.kind is QueryKind.TwoINeg:
                raise MalformedQueryError("2i-neg needs exactly one HinderedBy edge, in its last branch")

    @property
    def structure(self) -> QueryStructure:
        return STRUCTURES[self.kind]

    def key(self) -> tuple:
        """Identity for deduplication; seed and witness are not part of the query."""
        return (self.kind, self.anchors, tuple(r.value for r in self.relations))

    def binding(self) -> dict[str, int]:
        st = self.structure
        b = dict(zip(st.anchors, self.anchors))
        b.update(zip(st.existentials, self.witness))
        b[ANSWER] = self.seed_answer
        return b

    def provenance(self) -> list[tuple[int, Relation, int]]:
        """Triples instantiated by the sampling walk (requires a witness for
        kinds with existentials)."""
        b = self.binding()
        return [(b[src], r, b[dst]) for (src, dst), r in zip(self.structure.edges, self.relations)]


@dataclass(frozen=True)
class AnswerSet:
    answers: tuple[int, ...]
    bindings: Mapping[str, tuple[int, ...]] = field(default_factory=dict, compare=False)

    def __contains__(self, node: object) -> bool:
        return node in set(self.answers)

    def __len__(self) -> int:
        return len(self.answers)

    def __iter__(self):
        return iter(self.answers)


# --- evaluation ---------------------------------------------------------------


def answer_query(g: KnowledgeGraph, q: QueryInstance) -> AnswerSet:
    """Exact answers by leaves-to-root evaluation.

    A variable's value is the intersection, over its incoming edges, of the
    union of successors of the edge source's value. HinderedBy is an ordinary
    edge, not a complement.
    """
    st = q.structure
    for a in q.anchors:
        g.text(a)  # raises on stale ids
    values: dict[str, frozenset[int]] = {name: frozenset([a]) for name, a in zip(st.anchors, q.anchors)}
    for var in st.variables:
        branch_sets = []
        for slot in st.incoming(var):
            src = st.edges[slot][0]
            rel = q.relations[slot]
            reached: set[int] = set()
            for v in values[src]:
                reached.update(g.successors(v, rel))
            branch_sets.append(reached)
        values[var] = frozenset(set.intersection(*branch_sets)) if branch_sets else frozenset()
    bindings = {v: tuple(sorted(values[v])) for v in st.variables}
    return AnswerSet(bindings[ANSWER], bindings)


class OracleTooLarge(RuntimeError):
    pass


BRUTE_FORCE_LIMIT = 10**8


def brute_force_answers(g: KnowledgeGraph, q: QueryInstance) -> AnswerSet:
    """Answers by enumerating every assignment of (?, existentials) over all
    nodes and checking each literal. Test oracle only."""
    st = q.structure
    n = g.num_nodes
    free = (ANSWER,) + st.existentials
    if n ** len(free) > BRUTE_FORCE_LIMIT:
        raise OracleTooLarge(f"{n}^{len(free)} assignments exceeds {BRUTE_FORCE_LIMIT}")
    # positions: anchors first, then the free variables in ``free`` order
    pos = {name: i for i, name in enumerate(st.anchors + free)}
    literals = [(pos[src], r, pos[dst]) for (src, dst), r in zip(st.edges, q.relations)]
    anchors = tuple(q.anchors)
    answer_pos = pos[ANSWER]
    has_edge = g.has_edge
    found = set()
    for combo in itertools.product(range(n), repeat=len(free)):
        env = anchors + combo
        if all(has_edge(env[s], r, env[d]) for s, r, d in literals):
            found.add(env[answer_pos])
    return AnswerSet(tuple(sorted(found)))


# --- sampling -----------------------------------------------------------------


def top_predecessors(g: KnowledgeGraph, node: int, cutoff: Optional[int]) -> tuple[Predecessor, ...]:
    """Predecessors ranked by plausibility (ties by head id), truncated to ``cutoff``."""
    preds = g.predecessors(node)
    return preds if cutoff is None else preds[:cutoff]


def sample_query(
    g: KnowledgeGraph, kind: QueryKind, rng: random.Random, cutoff: Optional[int] = 10
) -> Optional[QueryInstance]:
    """Ground ``kind`` by walking backward from a random answer node.

    Returns None when the walk dead-ends. At each variable, every incoming
    edge picks a (relation, node) pair uniformly from the node's top-``cutoff``
    predecessors; sibling edges pick distinct pairs. All bound nodes, anchors
    and variables alike, are pairwise distinct. Plain 2i never uses HinderedBy;
    2i-neg uses it exactly in its second branch.
    """
    if cutoff is not None and cutoff < 1:
        raise ValueError("cutoff must be >= 1")
    seeds = g.answer_nodes()
    if not seeds:
        return None
    st = STRUCTURES[kind]
    seed = rng.choice(seeds)
    bound: dict[str, int] = {ANSWER: seed}
    relations: list[Optional[Relation]] = [None] * st.num_relations
    anchor_set = set(st.anchors)

    # pre-order: a variable is expanded before the variables feeding it
    stack = [ANSWER]
    while stack:
        var = stack.pop()
        node = bound[var]
        top = top_predecessors(g, node, None)
        taken: set[tuple[Relation, int]] = set()
        for slot in st.incoming(var):
            src = st.edges[slot][0]
            if kind in (QueryKind.TwoI, QueryKind.TwoINeg):
                # a 2i with a HinderedBy branch is a 2i-neg, so keep the kinds disjoint
                want_neg = slot in st.negated_slots
                pool = [p for p in top if (p.relation is Relation.HinderedBy) == want_neg]
            else:
                pool = list(top)
            if cutoff is not None:
                pool = pool[:cutoff]
            used = set(bound.values())
            cands = [p for p in pool if (p.relation, p.head) not in taken and p.head not in used]
            if not cands:
                return None
            pick = rng.choice(cands)
            taken.add((pick.relation, pick.head))
            bound[src] = pick.head
            relations[slot] = pick.relation
            if src not in anchor_set:
                stack.append(src)

    anchors = [bound[a] for a in st.anchors]
    rels = list(relations)
    for group in st.symmetric:
        pairs = sorted(((anchors[i], rels[i]) for i in group), key=lambda ar: (ar[0], RELATION_INDEX[ar[1]]))
        for i, (a, r) in zip(group, pairs):
            anchors[i], rels[i] = a, r
    return QueryInstance(
        kind=kind,
        anchors=tuple(anchors),
        relations=tuple(rels),  # type: ignore[arg-type]
        seed_answer=seed,
        witness=tuple(bound[e] for e in st.existentials),
    )


def derive_rng(seed: int, *labels: object) -> random.Random:
    """Independent, reproducible stream for (seed, labels)."""
    text = "|".join([str(seed)] + [str(x) for x in labels])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return random.Random(int.from_bytes(digest, "big"))


class SeedNotAnswerError(AssertionError):
    pass


def batch_sample(
    g: KnowledgeGraph,
    mix: Mapping[QueryKind | str, int],
    seed: int = 0,
    cutoff: Optional[int] = 10,
    retries: int = 20,
    workers: int = 1,
) -> list[tuple[QueryInstance, AnswerSet]]:
    """Sample up to ``mix[kind]`` distinct instances per kind and answer them.

    Attempt ``j`` of kind ``k`` uses its own stream ``derive_rng(seed, k, j)``
    and at most ``count * retries`` attempts are made per kind. Output order
    is kind order, then attempt order, independent of ``workers``.
    """
    wanted = {QueryKind.parse(k) if isinstance(k, str) else k: int(v) for k, v in mix.items()}
    if any(v < 0 for v in wanted.values()):
        raise ValueError("mix counts must be >= 0")

    def sample_kind(kind: QueryKind) -> list[QueryInstance]:
        count = wanted.get(kind, 0)
        seen: set[tuple] = set()
        out: list[QueryInstance] = []
        for attempt in range(count * retries):
            if len(out) >= count:
                break
            q = sample_query(g, kind, derive_rng(seed, kind.value, attempt), cutoff)
            if q is None or q.key() in seen:
                continue
            seen.add(q.key())
            out.append(q)
        if len(out) < count:
            logger.info("%s: sampled %d of %d requested", kind, len(out), count)
        return out

    kinds = [k for k in QueryKind if wanted.get(k, 0) > 0]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        per_kind = list(pool.map(sample_kind, kinds))
        instances = [q for qs in per_kind for q in qs]
        answers = list(pool.map(lambda q: answer_query(g, q), instances))

    for q, ans in zip(instances, answers):
        if q.seed_answer not in ans:
            raise SeedNotAnswerError(f"seed {q.seed_answer} missing from answers of {q}")
    return list(zip(instances, answers))


@dataclass(frozen=True)
class KindStats:
    count: int
    mean: float
    median: float


def answer_stats(results: Iterable[tuple[QueryInstance, AnswerSet]]) -> dict[str, KindStats]:
    sizes: dict[QueryKind, list[int]] = {}
    for q, ans in results:
        sizes.setdefault(q.kind, []).append(len(ans))
    return {
        k.value: KindStats(len(v), statistics.fmean(v), float(statistics.median(v)))
        for k in QueryKind
        if (v := sizes.get(k))
    }


# --- line-record serialization -----------------------------------------------------


def instance_to_record(g: KnowledgeGraph, q: QueryInstance, ans: AnswerSet) -> dict:
    return {
        "kind": q.kind.value,
        "anchors": [g.text(a) for a in q.anchors],
        "relations": [r.value for r in q.relations],
        "seed_answer": g.text(q.seed_answer),
        "witness": [g.text(w) for w in q.witness],
        "answers": [g.text(a) for a in ans.answers],
        "provenance": [[g.text(h), r.value, g.text(t)] for h, r, t in q.provenance()],
    }


def instance_from_record(g: KnowledgeGraph, rec: Mapping) -> QueryInstance:
    return QueryInstance(
        kind=QueryKind.parse(rec["kind"]),
        anchors=tuple(g.node_id(t) for t in rec["anchors"]),
        relations=tuple(Relation.parse(r) for r in rec["relations"]),
        seed_answer=g.node_id(rec["seed_answer"]),
        witness=tuple(g.node_id(t) for t in rec.get("witness", ())),
    )


def parse_mix(spec: str | Mapping[str, int] | Sequence) -> dict[QueryKind, int]:
    """Accept ``{"2i": 10}`` or ``"2i=10,2p=5"``."""
    if isinstance(spec, str):
        items = []
        for part in filter(None, (p.strip() for p in spec.split(","))):
            name, _, val = part.partition("=")
            items.append((name, int(val)))
    elif isinstance(spec, Mapping):
        items = list(spec.items())
    else:
        items = list(spec)
    return {QueryKind.parse(str(k)): int(v) for k, v in items}
