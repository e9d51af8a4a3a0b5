"""Triple-to-statement rendering, plausibility providers, and the score filter."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from cqforge._http import post_json
from cqforge.kg import KnowledgeGraph, Relation, Triple
from cqforge.normalization import subject_for

logger = logging.getLogger(__name__)

TextTriple = tuple[str, Relation, str]

# Declarative templates over the bare (subjectless) tail phrase.
STATEMENT_TEMPLATES: dict[Relation, str] = {
    Relation.xIntent: "If {h}, then PersonX wanted {t}",
    Relation.xNeed: "If {h}, then PersonX needed {t}",
    Relation.xWant: "If {h}, then PersonX wants {t}",
    Relation.xEffect: "If {h}, then PersonX {t}",
    Relation.xReact: "If {h}, then PersonX feels {t}",
    Relation.xAttr: "If {h}, then PersonX is seen as {t}",
    Relation.oEffect: "If {h}, then PersonY {t}",
    Relation.oReact: "If {h}, then PersonY feels {t}",
    Relation.oWant: "If {h}, then PersonY wants {t}",
    Relation.HinderedBy: "If {h}, then it can be hindered by {t}",
    Relation.isAfter: "If {h}, then before that, {t}",
    Relation.isBefore: "If {h}, then after that, {t}",
}

_TO_FORM = {Relation.xWant, Relation.oWant, Relation.xIntent, Relation.xNeed}
_IS_FORM = {Relation.xReact, Relation.oReact, Relation.xAttr}
_PLAIN_FORM = {Relation.xEffect, Relation.oEffect}


def bare_tail(t: str, r: Relation) -> str:
    """Undo subject insertion so normalized and raw tails render alike."""
    t = t.strip()
    subj = subject_for(r) + " "
    if not t.startswith(subj) or r not in _TO_FORM | _IS_FORM | _PLAIN_FORM:
        return t
    rest = t[len(subj):]
    if r in _IS_FORM and rest.startswith("is "):
        return rest[3:]
    if r in _TO_FORM and not re.match(r"to\s", rest, re.IGNORECASE):
        return "to " + rest
    return rest


def triple_to_statement(h: str, r: Relation, t: str) -> str:
    return STATEMENT_TEMPLATES[r].format(h=h.strip(), t=bare_tail(t, r))


class ProviderFailure(RuntimeError):
    def __init__(self, message: str, triple: Optional[TextTriple] = None):
        self.triple = triple
        super().__init__(message if triple is None else f"{message}: {triple!r}")


class PlausibilityProvider:
    """Scores text triples in [0, 1]."""

    def score(self, triples: Sequence[TextTriple]) -> list[float]:
        raise NotImplementedError


class ConstantProvider(PlausibilityProvider):
    def __init__(self, value: float = 1.0):
        if not 0.0 <= value <= 1.0:
            raise ValueError("constant score must be in [0, 1]")
        self.value = value

    def score(self, triples):
        return [self.value] * len(triples)


class ScoreTableProvider(PlausibilityProvider):
    """Lookup keyed by the exact (head, relation, tail) strings.

    Misses fall back to ``default`` so partial tables stay usable.
    """

    def __init__(self, table: dict[tuple[str, str, str], float], default: float = 1.0):
        self.table = table
        self.default = default

    @classmethod
    def from_file(cls, path: str | Path, default: float = 1.0) -> "ScoreTableProvider":
        table = {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\r\n")
                if not line.strip() or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 4:
                    raise ProviderFailure(f"{path}:{lineno}: expected head<TAB>relation<TAB>tail<TAB>score")
                score = float(parts[3])
                if not 0.0 <= score <= 1.0:
                    raise ProviderFailure(f"{path}:{lineno}: score {score} outside [0, 1]")
                table[(parts[0].strip(), parts[1].strip(), parts[2].strip())] = score
        return cls(table, default)

    def score(self, triples):
        return [self.table.get((h.strip(), str(r), t.strip()), self.default) for h, r, t in triples]


class HttpPlausibilityProvider(PlausibilityProvider):
    """POST ``{"statements": [...]}``, expect ``{"scores": [...]}`` of equal length."""

    def __init__(self, url: str, batch_size: int = 128, timeout: float = 60.0):
        self.url = url
        self.batch_size = batch_size
        self.timeout = timeout

    def score(self, triples):
        out: list[float] = []
        for start in range(0, len(triples), self.batch_size):
            batch = list(triples[start:start + self.batch_size])
            statements = [triple_to_statement(*tr) for tr in batch]
            try:
                resp = post_json(self.url, {"statements": statements}, self.timeout)
            except Exception as exc:
                raise ProviderFailure(f"scoring request failed ({exc})", batch[0]) from exc
            scores = resp.get("scores")
            if not isinstance(scores, list) or len(scores) != len(batch):
                raise ProviderFailure("scoring endpoint returned a mismatched batch", batch[0])
            for tr, s in zip(batch, scores):
                if not isinstance(s, (int, float)) or not 0.0 <= s <= 1.0:
                    raise ProviderFailure(f"score {s!r} outside [0, 1]", tr)
                out.append(float(s))
        return out


@dataclass(frozen=True)
class RemovalReport:
    threshold: float
    triples_before: int
    triples_removed: int
    nodes_before: int
    nodes_removed: int

    @property
    def removed_fraction(self) -> float:
        return self.triples_removed / self.triples_before if self.triples_before else 0.0

    def as_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "triples_before": self.triples_before,
            "triples_removed": self.triples_removed,
            "removed_fraction": self.removed_fraction,
            "nodes_before": self.nodes_before,
            "nodes_removed": self.nodes_removed,
        }


def filter_by_plausibility(
    g: KnowledgeGraph, provider: Optional[PlausibilityProvider] = None, threshold: float = 0.5
) -> tuple[KnowledgeGraph, RemovalReport]:
    """Drop triples scoring below ``threshold`` and nodes left without edges.

    With ``provider=None`` the scores already attached to the graph are used.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    records = g.text_triples()
    if provider is None:
        scores = [p for *_, p in records]
    else:
        scores = provider.score([(h, r, t) for h, r, t, _ in records])
        if len(scores) != len(records):
            raise ProviderFailure("provider returned wrong number of scores")
    kept = [(h, r, t, s) for (h, r, t, _), s in zip(records, scores) if s >= threshold]

    # rebuild in the original node order so ids stay as stable as possible
    used = {h for h, *_ in kept} | {t for _, _, t, _ in kept}
    texts = [x for x in g.texts if x in used]
    index = {x: i for i, x in enumerate(texts)}
    out = KnowledgeGraph(texts, [Triple(index[h], r, index[t], s) for h, r, t, s in kept])
    report = RemovalReport(threshold, len(records), len(records) - len(kept), g.num_nodes, g.num_nodes - len(texts))
    logger.info("plausibility filter removed %.1f%% of triples", 100 * report.removed_fraction)
    return out, report
