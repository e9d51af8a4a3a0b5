"""Multiple-choice and generative records, with byte-stable JSON lines.

Records are written one JSON object per line with sorted keys, so identical
records always serialize to identical bytes. ``schema_version`` is bumped on
any incompatible field change.

MCQA options A-D hold the gold answer and three distractors; option E is
always ``NONE_OPTION`` and is never the machine-assigned label (a correct
"none" answer can only come from human review).
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

from cqforge.kg import KnowledgeGraph, Relation
from cqforge.queries import AnswerSet, QueryInstance, QueryKind, instance_to_record
from cqforge.verbalize import VerbalizedItem, substitute_names

SCHEMA_VERSION = 1
NONE_OPTION = "None of the answers are correct"
GEN_TOKEN = "[GEN]"
COMPACT_KINDS = (QueryKind.OneP, QueryKind.TwoP, QueryKind.TwoI, QueryKind.ThreeI)
NUM_DISTRACTOR_OPTIONS = 3


class EmitError(ValueError):
    pass


def record_id(provenance: Sequence[Sequence[str]], kind: str, seed: int) -> str:
    payload = json.dumps([[list(t) for t in provenance], kind, seed], ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:20]


def _dumps(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


@dataclass
class MCQARecord:
    id: str
    context: str
    question: str
    options: list[str]
    label: int
    kind: str
    provenance: dict
    schema_version: int = SCHEMA_VERSION
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return _dumps(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "MCQARecord":
        return cls(**json.loads(line))


@dataclass
class GenerativeRecord:
    id: str
    input: str
    references: list[str]
    kind: str
    mode: str  # "compact" | "verbalized"
    provenance: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> str:
        return _dumps(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "GenerativeRecord":
        return cls(**json.loads(line))


def _query_provenance(g: KnowledgeGraph, q: QueryInstance, ans: AnswerSet, seed: int) -> dict:
    rec = instance_to_record(g, q, ans)
    rec["seed"] = seed
    return rec


def emit_mcqa(g: KnowledgeGraph, item: VerbalizedItem, rng: random.Random) -> MCQARecord:
    """Pick three distractors, place the gold at a random position in A-D and
    append the sentinel option."""
    if len(item.distractors) < NUM_DISTRACTOR_OPTIONS:
        raise EmitError(f"item {item.item_id}: need {NUM_DISTRACTOR_OPTIONS} distractors, got {len(item.distractors)}")
    picks = sorted(rng.sample(range(len(item.distractors)), NUM_DISTRACTOR_OPTIONS))
    chosen = [item.distractors[i] for i in picks]
    label = rng.randrange(NUM_DISTRACTOR_OPTIONS + 1)
    options = chosen[:label] + [item.gold] + chosen[label:] + [NONE_OPTION]
    if len({o.strip().lower() for o in options}) != len(options):
        raise EmitError(f"item {item.item_id}: options are not pairwise distinct: {options}")

    q = item.instance
    prov = _query_provenance(g, q, item.answers, item.seed)
    prov["names"] = dict(item.names)
    prov["distractors"] = [g.text(item.distractor_nodes[i]) for i in picks] if item.distractor_nodes else []
    prov["candidate_distractors"] = [g.text(d) for d in item.distractor_nodes]
    return MCQARecord(
        id=record_id(prov["provenance"], q.kind.value, item.seed),
        context=item.context,
        question=item.question,
        options=options,
        label=label,
        kind=q.kind.value,
        provenance=prov,
        metadata=dict(item.metadata),
    )


def compact_input(anchors: Sequence[str], relations: Sequence[Relation | str]) -> str:
    return " ".join([*(a.strip() for a in anchors), *(str(r) for r in relations), GEN_TOKEN])


def emit_generative(
    g: KnowledgeGraph,
    q: QueryInstance,
    ans: AnswerSet,
    mode: str = "compact",
    item: Optional[VerbalizedItem] = None,
    seed: int = 0,
) -> GenerativeRecord:
    """Serialize ``q`` for generation.

    Compact mode writes anchors, then relation names, then ``[GEN]``, with the
    unsubstituted answer texts as references; only 1p/2p/2i/3i have a compact
    grammar. Verbalized mode writes the item's context and question.
    """
    prov = _query_provenance(g, q, ans, seed)
    rid = record_id(prov["provenance"], q.kind.value, seed)
    if mode == "compact":
        if q.kind not in COMPACT_KINDS:
            raise EmitError(f"no compact grammar for {q.kind} queries")
        return GenerativeRecord(
            id=rid,
            input=compact_input([g.text(a) for a in q.anchors], q.relations),
            references=[g.text(a) for a in ans.answers],
            kind=q.kind.value,
            mode="compact",
            provenance=prov,
        )
    if mode == "verbalized":
        if item is None:
            raise EmitError("verbalized mode needs a verbalized item")
        prov["names"] = dict(item.names)
        return GenerativeRecord(
            id=rid,
            input=f"{item.context} {item.question}",
            references=[substitute_names(g.text(a), item.names) for a in ans.answers],
            kind=q.kind.value,
            mode="verbalized",
            provenance=prov,
        )
    raise EmitError(f"unknown generative mode {mode!r}")


class GrammarError(ValueError):
    pass


_NUM_ANCHORS = {QueryKind.OneP: 1, QueryKind.TwoP: 1, QueryKind.TwoI: 2, QueryKind.ThreeI: 3}
_NUM_RELATIONS = {QueryKind.OneP: 1, QueryKind.TwoP: 2, QueryKind.TwoI: 2, QueryKind.ThreeI: 3}


def parse_compact_input(
    text: str, kind: QueryKind | str, lexicon: Optional[Iterable[str]] = None
) -> tuple[list[str], list[Relation]]:
    """Recover (anchors, relations) from a compact generative input.

    Relations are the trailing vocabulary tokens before ``[GEN]``. For
    multi-anchor kinds the anchor prefix is split on spaces in every possible
    way and the unique split whose parts all appear in ``lexicon`` wins.
    """
    kind = QueryKind.parse(kind) if isinstance(kind, str) else kind
    if kind not in _NUM_ANCHORS:
        raise GrammarError(f"no compact grammar for {kind}")
    tokens = text.split(" ")
    if not tokens or tokens[-1] != GEN_TOKEN:
        raise GrammarError(f"input does not end with {GEN_TOKEN}")
    n_rel = _NUM_RELATIONS[kind]
    body = tokens[:-1]
    if len(body) < n_rel + _NUM_ANCHORS[kind]:
        raise GrammarError("input too short")
    try:
        relations = [Relation(tok) for tok in body[-n_rel:]]
    except ValueError as exc:
        raise GrammarError(str(exc)) from None
    words = body[:-n_rel]
    k = _NUM_ANCHORS[kind]
    if k == 1:
        return [" ".join(words)], relations
    if lexicon is None:
        raise GrammarError("multi-anchor inputs need a lexicon to split anchors")
    known = set(lexicon)
    splits = []
    for cuts in _cut_points(len(words), k):
        parts = [" ".join(words[a:b]) for a, b in zip((0,) + cuts, cuts + (len(words),))]
        if all(p in known for p in parts):
            splits.append(parts)
    if len(splits) != 1:
        raise GrammarError(f"{len(splits)} anchor splits match the lexicon")
    return splits[0], relations


def _cut_points(n: int, k: int) -> Iterator[tuple[int, ...]]:
    yield from combinations(range(1, n), k - 1)


def write_jsonl(path: str | Path, records: Iterable) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write((rec if isinstance(rec, str) else rec.to_json()) + "\n")
            n += 1
    return n


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
