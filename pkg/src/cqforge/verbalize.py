"""Turn grounded queries into contexts and questions.

Contexts come from a discourse-connective rule or from an external
text-generation service; questions come from fixed relation fragments slotted
into one skeleton per query kind. Person placeholders are swapped for sampled
first names, consistently across one item.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence

from cqforge._http import TransportError, post_json
from cqforge.kg import KnowledgeGraph, Relation
from cqforge.queries import AnswerSet, QueryInstance, QueryKind, instance_from_record, instance_to_record

logger = logging.getLogger(__name__)

# Question fragment for each relation, used verbatim.
RELATION_FRAGMENTS: dict[Relation, str] = {
    Relation.xIntent: "the intention of PersonX before",
    Relation.xNeed: "what PersonX needed to do before",
    Relation.xWant: "what PersonX wants to do after",
    Relation.xEffect: "the effect on PersonX after",
    Relation.xReact: "what PersonX feels after",
    Relation.xAttr: "what PersonX is seen as given",
    Relation.oEffect: "the effect on PersonY after",
    Relation.oReact: "what PersonY feels after",
    Relation.oWant: "what PersonY wants to do after",
    Relation.HinderedBy: "what hindered",
    Relation.isAfter: "what happens before",
    Relation.isBefore: "what happens after",
}

# Slots: {pN} is the fragment for relation slot N, {vN} the text of anchor N.
# Nested projections put the hop closest to the answer outermost.
QUESTION_TEMPLATES: dict[QueryKind, str] = {
    QueryKind.OneP: "What event or state is {p0} {v0}?",
    QueryKind.TwoP: "What event or state is {p1} {p0} {v0}?",
    QueryKind.TwoI: "What event or state is both {p0} {v0} and also {p1} {v1}?",
    QueryKind.TwoINeg: "What event or state is both {p0} {v0} and also {p1} {v1}?",
    QueryKind.ThreeI: "What event or state is both {p0} {v0}, {p1} {v1}, and also {p2} {v2}?",
    QueryKind.IP: "What event or state is {p2} the event that is both {p0} {v0}, and also {p1} {v1}?",
    QueryKind.PI: "What event or state is both {p1} {p0} {v0}, and also {p2} {v1}?",
}

PERSON_TOKEN = re.compile(r"\bPerson([XYZ])\b")
PERSONS = ("PersonX", "PersonY", "PersonZ")


# --- data tables ----------------------------------------------------------------


def _data_text(name: str) -> str:
    return resources.files("cqforge.data").joinpath(name).read_text(encoding="utf-8")


def load_chronology(path: Optional[str | Path] = None) -> dict[Relation, str]:
    raw = _data_text("chronology.tsv") if path is None else Path(path).read_text(encoding="utf-8")
    table = {}
    for line in raw.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        rel, cls = line.split("\t")
        if cls not in ("cause", "effect", "attribute"):
            raise ValueError(f"bad chronology class {cls!r} for {rel}")
        table[Relation.parse(rel)] = cls
    missing = set(Relation) - set(table)
    if missing:
        raise ValueError(f"chronology table misses {sorted(m.value for m in missing)}")
    return table


CHRONOLOGY = load_chronology()


class NameTableMissing(FileNotFoundError):
    pass


def load_names(path: Optional[str | Path] = None) -> tuple[str, ...]:
    """Read a ``name<TAB>frequency`` registry (frequency optional).

    Names are deduplicated preserving order; sampling later is uniform.
    """
    if path is None:
        raw = _data_text("names.tsv")
    else:
        try:
            raw = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise NameTableMissing(f"name table not found: {path}") from None
    names: dict[str, None] = {}
    for line in raw.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        names[line.split("\t")[0].strip()] = None
    if len(names) < len(PERSONS):
        raise NameTableMissing(f"name table needs at least {len(PERSONS)} names")
    return tuple(names)


def sample_name_assignment(rng: random.Random, names: Sequence[str]) -> dict[str, str]:
    picked = rng.sample(list(names), len(PERSONS))
    return dict(zip(PERSONS, picked))


def substitute_names(text: str, assignment: Mapping[str, str]) -> str:
    return PERSON_TOKEN.sub(lambda m: assignment.get(m.group(0), m.group(0)), text)


# --- negation -------------------------------------------------------------------

_AUX_NEG = {
    "is": "isn't", "are": "aren't", "was": "wasn't", "were": "weren't", "can": "can't",
    "will": "won't", "does": "doesn't", "did": "didn't", "has": "hasn't", "have": "haven't",
    "would": "wouldn't", "should": "shouldn't", "could": "couldn't",
}


def _base_form(verb: str) -> str:
    if verb.endswith("ies") and len(verb) > 4:
        return verb[:-3] + "y"
    for suffix in ("sses", "shes", "ches", "xes", "zes", "oes"):
        if verb.endswith(suffix):
            return verb[:-2]
    if verb.endswith("s") and not verb.endswith("ss") and len(verb) > 2:
        return verb[:-1]
    return verb


def negate_event(text: str) -> str:
    """Shallow negation: "PersonX goes shopping" -> "PersonX doesn't go shopping".

    The word after the subject is treated as the main verb; grammar is not
    checked.
    """
    tokens = text.split()
    if len(tokens) < 2:
        return f"not {text}"
    subj, verb, rest = tokens[0], tokens[1], tokens[2:]
    low = verb.lower()
    if low in _AUX_NEG:
        return " ".join([subj, _AUX_NEG[low]] + rest)
    return " ".join([subj, "doesn't", _base_form(verb)] + rest)


# --- rule contexts ------------------------------------------------------------------


def anchor_relations(q: QueryInstance) -> list[Relation]:
    """Relation on the edge leaving each anchor."""
    st = q.structure
    return [next(q.relations[i] for i, (src, _) in enumerate(st.edges) if src == a) for a in st.anchors]


def anchor_order(q: QueryInstance, chronology: Mapping[Relation, str] = CHRONOLOGY) -> tuple[list[int], bool]:
    """Anchor positions in narrative order and whether "After ..." applies.

    When some anchor precedes the answer (effect side) and another follows it
    (cause side), effect-side and attribute anchors come first.
    """
    classes = [chronology[r] for r in anchor_relations(q)]
    idx = list(range(len(classes)))
    if "effect" in classes and "cause" in classes:
        first = [i for i in idx if classes[i] != "cause"]
        second = [i for i in idx if classes[i] == "cause"]
        return first + second, True
    return idx, False


def anchor_display_texts(g: KnowledgeGraph, q: QueryInstance) -> list[str]:
    texts = [g.text(a) for a in q.anchors]
    if q.kind is QueryKind.TwoINeg:
        for i in q.structure.negated_slots:
            texts[i] = negate_event(texts[i])
    return texts


def verbalize_context_rule(g: KnowledgeGraph, q: QueryInstance,
                           chronology: Mapping[Relation, str] = CHRONOLOGY) -> str:
    texts = anchor_display_texts(g, q)
    if len(texts) == 1:
        return texts[0]
    order, chrono = anchor_order(q, chronology)
    if chrono:
        classes = [chronology[r] for r in anchor_relations(q)]
        before = [texts[i] for i in order if classes[i] != "cause"]
        after = [texts[i] for i in order if classes[i] == "cause"]
        return f"After {' and '.join(before)}, {' and '.join(after)}"
    return " and ".join(texts[i] for i in order)


def verbalize_question(g: KnowledgeGraph, q: QueryInstance, assignment: Optional[Mapping[str, str]] = None) -> str:
    slots = {f"p{i}": RELATION_FRAGMENTS[r] for i, r in enumerate(q.relations)}
    slots.update({f"v{i}": g.text(a) for i, a in enumerate(q.anchors)})
    text = QUESTION_TEMPLATES[q.kind].format(**slots)
    return substitute_names(text, assignment) if assignment else text


# --- LLM contexts -----------------------------------------------------------------


class TextGenerationClient(Protocol):
    def generate(self, request: dict) -> str: ...


class MalformedResponse(RuntimeError):
    pass


class HttpTextClient:
    """POST the request as JSON; the service answers ``{"text": "..."}``."""

    def __init__(self, url: str, timeout: float = 120.0):
        self.url = url
        self.timeout = timeout

    def generate(self, request: dict) -> str:
        resp = post_json(self.url, request, self.timeout)
        text = resp.get("text") if isinstance(resp, dict) else None
        if not isinstance(text, str):
            raise MalformedResponse(f"response lacks a string 'text' field: {resp!r}")
        return text


LLM_KINDS = (QueryKind.TwoI, QueryKind.IP, QueryKind.PI, QueryKind.TwoINeg)


@lru_cache(maxsize=None)
def _prompt(name: str) -> str:
    return _data_text(f"prompts/{name}.txt").rstrip("\n")


@lru_cache(maxsize=None)
def _exemplars() -> dict:
    return json.loads(_data_text("llm_exemplars.json"))


def build_llm_request(q: QueryInstance, events: Sequence[str]) -> dict:
    if q.kind not in LLM_KINDS:
        raise ValueError(f"no LLM prompt for {q.kind} queries")
    key = "pair_neg" if q.kind is QueryKind.TwoINeg else "pair"
    return {
        "system": _prompt(key),
        "exemplars": _exemplars()[key],
        "anchors": list(events),
        "kind": q.kind.value,
    }


_TAG = {1: re.compile(r"<E1>(.*?)</E1>", re.S), 2: re.compile(r"<E2>(.*?)</E2>", re.S)}
_NEGATORS = {"not", "never", "doesn't", "didn't", "don't", "isn't", "wasn't", "won't", "can't",
             "hasn't", "haven't", "aren't", "weren't", "does", "did", "no"}


def _norm(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+(?:'[a-z0-9]+)*", text.lower())


def _stem(tok: str) -> str:
    return _base_form(tok)


def span_matches(span: str, event: str, negated: bool = False) -> bool:
    """Compare a tagged span with the event it should contain.

    Plain spans must equal the event up to case, whitespace and punctuation.
    Negated spans must carry a negator and otherwise match the event word for
    word after crude verb stemming.
    """
    s, e = _norm(span), _norm(event)
    if not negated:
        return s == e
    if not any(t in _NEGATORS for t in s):
        return False
    core = [_stem(t) for t in s if t not in _NEGATORS]
    return core == [_stem(t) for t in e if t not in _NEGATORS]


def verbalize_context_llm(
    g: KnowledgeGraph,
    q: QueryInstance,
    client: TextGenerationClient,
    assignment: Optional[Mapping[str, str]] = None,
) -> Optional[str]:
    """Ask the service for a narrative around the two anchors.

    Returns None on "NA" or when the tagged spans are missing or do not match
    the anchors; the returned narrative has its tags stripped.
    """
    order, _ = anchor_order(q)
    raw = [g.text(q.anchors[i]) for i in order]
    events = [substitute_names(t, assignment) if assignment else t for t in raw]
    neg_pos = None
    if q.kind is QueryKind.TwoINeg:
        neg_anchor = q.structure.negated_slots[0]
        neg_pos = order.index(neg_anchor)
        if neg_pos != 1:
            # the negated event is always E2
            events = [events[1 - neg_pos], events[neg_pos]]
            neg_pos = 1
    text = client.generate(build_llm_request(q, events))
    if not isinstance(text, str):
        raise MalformedResponse(f"expected text, got {type(text).__name__}")
    text = text.strip()
    if text.rstrip(".").strip().upper() == "NA":
        return None
    for k in (1, 2):
        spans = _TAG[k].findall(text)
        if len(spans) != 1 or not span_matches(spans[0], events[k - 1], negated=(neg_pos == k - 1)):
            logger.debug("rejecting LLM context for %s: E%d span invalid", q.kind, k)
            return None
    return re.sub(r"</?E[12]>", "", text)


# --- item assembly -------------------------------------------------------------------


@dataclass
class VerbalizedItem:
    item_id: int
    instance: QueryInstance
    answers: AnswerSet
    context: str
    question: str
    gold: str
    distractors: list[str]
    answer_text: str  # gold node text before name substitution, used for grouping
    names: dict[str, str] = field(default_factory=dict)
    distractor_nodes: tuple[int, ...] = ()
    metadata: dict = field(default_factory=dict)
    seed: int = 0


def verbalize_item(
    g: KnowledgeGraph,
    item_id: int,
    q: QueryInstance,
    ans: AnswerSet,
    distractor_nodes: Sequence[int],
    rng: random.Random,
    names: Sequence[str],
    context: Optional[str] = None,
    context_source: str = "rule",
    assignment: Optional[Mapping[str, str]] = None,
    seed: int = 0,
) -> VerbalizedItem:
    """Rule-verbalize ``q`` (unless ``context`` is given) and substitute one
    name assignment into context, question, gold and every option."""
    assignment = dict(assignment) if assignment else sample_name_assignment(rng, names)
    ctx = context if context is not None else substitute_names(verbalize_context_rule(g, q), assignment)
    meta = {"context_source": context_source}
    if q.kind is QueryKind.TwoINeg and context is None:
        meta["negation_heuristic"] = True
    gold_raw = g.text(q.seed_answer)
    return VerbalizedItem(
        item_id=item_id,
        instance=q,
        answers=ans,
        context=ctx,
        question=verbalize_question(g, q, assignment),
        gold=substitute_names(gold_raw, assignment),
        distractors=[substitute_names(g.text(d), assignment) for d in distractor_nodes],
        answer_text=gold_raw,
        names=assignment,
        distractor_nodes=tuple(distractor_nodes),
        metadata=meta,
        seed=seed,
    )


def item_to_record(g: KnowledgeGraph, item: VerbalizedItem) -> dict:
    return {
        "item_id": item.item_id,
        "seed": item.seed,
        "query": instance_to_record(g, item.instance, item.answers),
        "context": item.context,
        "question": item.question,
        "gold": item.gold,
        "distractors": list(item.distractors),
        "distractor_nodes": [g.text(d) for d in item.distractor_nodes],
        "answer_text": item.answer_text,
        "names": dict(item.names),
        "metadata": dict(item.metadata),
    }


def item_from_record(g: KnowledgeGraph, rec: Mapping) -> VerbalizedItem:
    q = instance_from_record(g, rec["query"])
    answers = AnswerSet(tuple(sorted(g.node_id(t) for t in rec["query"]["answers"])))
    return VerbalizedItem(
        item_id=rec["item_id"],
        instance=q,
        answers=answers,
        context=rec["context"],
        question=rec["question"],
        gold=rec["gold"],
        distractors=list(rec["distractors"]),
        answer_text=rec["answer_text"],
        names=dict(rec["names"]),
        distractor_nodes=tuple(g.node_id(t) for t in rec["distractor_nodes"]),
        metadata=dict(rec.get("metadata", {})),
        seed=rec["seed"],
    )
