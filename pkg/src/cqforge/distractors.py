"""Negative answer options: random graph-wide picks plus anchor-neighborhood picks."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Optional

from cqforge.kg import KnowledgeGraph, Relation
from cqforge.queries import AnswerSet, QueryInstance
from cqforge.textutil import content_tokens


class DistractorError(RuntimeError):
    pass


def keyword_overlap_reject(candidate: str, gold: str, stopwords: Optional[frozenset[str]] = None) -> bool:
    """True if the candidate shares a content token with the gold answer."""
    if candidate.strip().lower() == gold.strip().lower():
        return True
    return bool(content_tokens(candidate, stopwords) & content_tokens(gold, stopwords))


@dataclass(frozen=True)
class DistractorSource:
    node: int
    kind: str  # "random" | "adversarial" | "backfill"
    anchor: Optional[int] = None
    relations: tuple[Relation, ...] = ()


@dataclass(frozen=True)
class DistractorSet:
    random_negatives: tuple[int, ...]
    adversarial_negatives: tuple[int, ...]
    provenance: tuple[DistractorSource, ...]

    @property
    def nodes(self) -> tuple[int, ...]:
        """Adversarial picks first, then random (backfill included)."""
        return self.adversarial_negatives + self.random_negatives

    @property
    def backfilled(self) -> int:
        return sum(1 for s in self.provenance if s.kind == "backfill")


def _adversarial_pool(g: KnowledgeGraph, q: QueryInstance, excluded: set[int]) -> list[tuple[int, int]]:
    """(node, anchor) pairs reachable in one hop from an anchor, any relation."""
    seen = {}
    for a in q.anchors:
        for t in g.out_neighbors(a):
            if t not in excluded and t not in seen:
                seen[t] = a
    return sorted(seen.items())


def sample_distractors(
    g: KnowledgeGraph,
    q: QueryInstance,
    ans: AnswerSet,
    rng: random.Random,
    random_count: int = 2,
    adversarial_count: int = 2,
    stopwords: Optional[frozenset[str]] = None,
    max_rejections: int = 200,
) -> DistractorSet:
    """Draw ``adversarial_count`` neighbors of the anchors that are not answers,
    then ``random_count`` graph-wide nodes that pass the keyword filter.

    Anchors are never offered. Missing adversarial picks are replaced by
    extra random ones, flagged as ``"backfill"`` in the provenance.
    """
    answers = set(ans.answers)
    answers.add(q.seed_answer)
    answer_texts = {g.text(a).strip().lower() for a in answers}
    gold = g.text(q.seed_answer)
    # an anchor repeated as an option would just echo the context
    excluded = answers | set(q.anchors)

    def text_ok(node: int) -> bool:
        return g.text(node).strip().lower() not in answer_texts

    pool = [(n, a) for n, a in _adversarial_pool(g, q, excluded) if text_ok(n)]
    k_adv = min(adversarial_count, len(pool))
    adv_pick = rng.sample(pool, k_adv)
    chosen = {n for n, _ in adv_pick}
    provenance = [
        DistractorSource(n, "adversarial", a, tuple(r for r in Relation if n in g.successors(a, r)))
        for n, a in adv_pick
    ]

    def random_ok(node: int) -> bool:
        return (
            node not in excluded
            and node not in chosen
            and text_ok(node)
            and not keyword_overlap_reject(g.text(node), gold, stopwords)
        )

    need = random_count + (adversarial_count - k_adv)
    rand_pick: list[int] = []
    n = g.num_nodes
    rejections = 0
    while len(rand_pick) < need and rejections < max_rejections and n:
        node = rng.randrange(n)
        if random_ok(node):
            rand_pick.append(node)
            chosen.add(node)
        else:
            rejections += 1
    if len(rand_pick) < need:
        # rejection sampling stalled; fall back to the exact eligible pool
        eligible = [x for x in range(n) if random_ok(x)]
        short = need - len(rand_pick)
        if len(eligible) < short:
            raise DistractorError(
                f"graph too small: need {adversarial_count + random_count} distractors for "
                f"{q.kind} query, found {len(chosen) + len(eligible)}"
            )
        extra = rng.sample(eligible, short)
        rand_pick.extend(extra)
        chosen.update(extra)

    for i, node in enumerate(rand_pick):
        provenance.append(DistractorSource(node, "random" if i < random_count else "backfill"))
    return DistractorSet(tuple(rand_pick), tuple(n for n, _ in adv_pick), tuple(provenance))
