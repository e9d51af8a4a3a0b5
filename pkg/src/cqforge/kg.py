"""Immutable event knowledge graph with forward/reverse indices.

Nodes are free-text events ("PersonX gets tired of it"), edges are typed
commonsense relations from a closed vocabulary. Every triple carries a
plausibility score in [0, 1].
"""

from __future__ import annotations

import enum
import logging
from bisect import insort
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

logger = logging.getLogger(__name__)


class Relation(str, enum.Enum):
    xIntent = "xIntent"
    xNeed = "xNeed"
    xWant = "xWant"
    xEffect = "xEffect"
    xReact = "xReact"
    xAttr = "xAttr"
    oEffect = "oEffect"
    oReact = "oReact"
    oWant = "oWant"
    HinderedBy = "HinderedBy"
    isAfter = "isAfter"
    isBefore = "isBefore"

    @classmethod
    def parse(cls, name: str) -> "Relation":
        try:
            return cls(name.strip())
        except ValueError:
            raise UnknownRelationError(name) from None

    def __str__(self) -> str:
        return self.value


# stable integer order used for tie-breaking and canonical sorting
RELATION_INDEX = {r: i for i, r in enumerate(Relation)}


class GraphError(Exception):
    pass


class UnknownRelationError(GraphError, ValueError):
    def __init__(self, name: str, lineno: Optional[int] = None):
        self.name = name
        self.lineno = lineno
        where = f" (line {lineno})" if lineno is not None else ""
        super().__init__(f"unknown relation {name!r}{where}")


class GraphFormatError(GraphError, ValueError):
    def __init__(self, message: str, lineno: Optional[int] = None):
        self.lineno = lineno
        where = f"line {lineno}: " if lineno is not None else ""
        super().__init__(where + message)


class StaleNodeError(GraphError, KeyError):
    """Raised for node ids that do not belong to the graph (e.g. pre-merge ids)."""

    def __str__(self) -> str:
        return f"stale or unknown node id {self.args[0]!r}"


class Triple(NamedTuple):
    head: int
    relation: Relation
    tail: int
    plausibility: float = 1.0


class Predecessor(NamedTuple):
    relation: Relation
    head: int
    plausibility: float


class KnowledgeGraph:
    """Read-only graph over event texts.

    Build with :meth:`from_triples` or :func:`load_graph`. Node ids are dense
    integers assigned in order of first appearance, so identical input yields
    identical ids.
    """

    __slots__ = ("_texts", "_ids", "_triples", "_forward", "_out", "_reverse", "_scores", "_outdeg")

    def __init__(self, texts: Sequence[str], triples: Sequence[Triple]):
        self._texts: tuple[str, ...] = tuple(texts)
        self._ids = {t: i for i, t in enumerate(self._texts)}
        if len(self._ids) != len(self._texts):
            raise GraphFormatError("duplicate node texts")

        forward: dict[tuple[int, Relation], list[int]] = defaultdict(list)
        out: dict[int, list[int]] = defaultdict(list)
        reverse: dict[int, list[Predecessor]] = defaultdict(list)
        scores: dict[tuple[int, Relation, int], float] = {}
        n = len(self._texts)
        for tr in triples:
            if not (0 <= tr.head < n and 0 <= tr.tail < n):
                raise GraphFormatError(f"triple {tr} references unknown node")
            key = (tr.head, tr.relation, tr.tail)
            if key in scores:
                raise GraphFormatError(f"duplicate triple {key}")
            scores[key] = tr.plausibility
            insort(forward[(tr.head, tr.relation)], tr.tail)
            out[tr.head].append(tr.tail)
            reverse[tr.tail].append(Predecessor(tr.relation, tr.head, tr.plausibility))

        self._scores = scores
        self._triples = tuple(
            Triple(h, r, t, p)
            for (h, r, t), p in sorted(scores.items(), key=lambda kv: (kv[0][0], RELATION_INDEX[kv[0][1]], kv[0][2]))
        )
        self._forward = {k: tuple(v) for k, v in forward.items()}
        self._out = {k: tuple(sorted(set(v))) for k, v in out.items()}
        self._outdeg = {k: len(v) for k, v in out.items()}
        self._reverse = {
            k: tuple(sorted(v, key=lambda p: (-p.plausibility, p.head, RELATION_INDEX[p.relation])))
            for k, v in reverse.items()
        }

    @classmethod
    def from_triples(
        cls,
        records: Iterable[tuple[str, Relation | str, str] | tuple[str, Relation | str, str, float]],
        extra_nodes: Iterable[str] = (),
    ) -> "KnowledgeGraph":
        """Build a graph from text triples.

        Texts are trimmed; duplicate (h, r, t) records collapse to one triple
        keeping the highest plausibility. ``extra_nodes`` adds nodes that
        may have no edges.
        """
        texts: dict[str, int] = {}

        def node(text: str) -> int:
            text = text.strip()
            if not text:
                raise GraphFormatError("empty node text")
            if text not in texts:
                texts[text] = len(texts)
            return texts[text]

        best: dict[tuple[int, Relation, int], float] = {}
        for rec in records:
            h, r, t = rec[0], rec[1], rec[2]
            p = float(rec[3]) if len(rec) > 3 else 1.0
            rel = r if isinstance(r, Relation) else Relation.parse(r)
            key = (node(h), rel, node(t))
            if key not in best or p > best[key]:
                best[key] = p
        for text in extra_nodes:
            node(text)
        return cls(list(texts), [Triple(h, r, t, p) for (h, r, t), p in best.items()])

    # --- basic accessors -------------------------------------------------

    def __len__(self) -> int:
        return len(self._texts)

    @property
    def num_nodes(self) -> int:
        return len(self._texts)

    @property
    def num_triples(self) -> int:
        return len(self._triples)

    @property
    def texts(self) -> tuple[str, ...]:
        return self._texts

    @property
    def triples(self) -> tuple[Triple, ...]:
        return self._triples

    def text(self, node: int) -> str:
        self._check(node)
        return self._texts[node]

    def node_id(self, text: str) -> int:
        return self._ids[text.strip()]

    def __contains__(self, text: object) -> bool:
        return isinstance(text, str) and text.strip() in self._ids

    def has_edge(self, head: int, relation: Relation, tail: int) -> bool:
        return (head, relation, tail) in self._scores

    def plausibility(self, head: int, relation: Relation, tail: int) -> float:
        return self._scores[(head, relation, tail)]

    def text_triples(self) -> list[tuple[str, Relation, str, float]]:
        return [(self._texts[h], r, self._texts[t], p) for h, r, t, p in self._triples]

    def _check(self, node: int) -> None:
        if not isinstance(node, int) or not 0 <= node < len(self._texts):
            raise StaleNodeError(node)

    # --- traversal ---------------------------------------------------------

    def successors(self, node: int, relation: Relation) -> tuple[int, ...]:
        self._check(node)
        return self._forward.get((node, relation), ())

    def out_neighbors(self, node: int) -> tuple[int, ...]:
        """Distinct tails reachable from ``node`` by any relation, sorted."""
        self._check(node)
        return self._out.get(node, ())

    def predecessors(self, node: int) -> tuple[Predecessor, ...]:
        self._check(node)
        return self._reverse.get(node, ())

    def in_degree(self, node: int) -> int:
        return len(self._reverse.get(node, ()))

    def out_degree(self, node: int) -> int:
        return self._outdeg.get(node, 0)

    def degrees(self) -> list[int]:
        """Undirected degree (in + out edge count) for each node id."""
        deg = [0] * len(self._texts)
        for h, _, t, _ in self._triples:
            deg[h] += 1
            deg[t] += 1
        return deg

    def answer_nodes(self) -> list[int]:
        """Node ids with in-degree >= 1, ascending."""
        return sorted(self._reverse)

    def write_tsv(self, path: str | Path) -> None:
        """Write the graph in the loader's tab-separated format."""
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for h, r, t, p in self.text_triples():
                f.write(f"{h}\t{r.value}\t{t}\t{p!r}\n")

    def __repr__(self) -> str:
        return f"KnowledgeGraph(nodes={self.num_nodes}, triples={self.num_triples})"


def load_graph(path: str | Path, scorer=None) -> KnowledgeGraph:
    """Load a ``head<TAB>relation<TAB>tail[<TAB>score]`` file.

    Blank lines and lines starting with ``#`` are skipped. If ``scorer`` is
    given, its scores replace whatever the file carries.
    """
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise GraphFormatError(f"expected 3 or 4 tab-separated fields, got {len(parts)}", lineno)
            head, rel, tail = parts[0].strip(), parts[1].strip(), parts[2].strip()
            if not head or not tail:
                raise GraphFormatError("empty head or tail text", lineno)
            try:
                relation = Relation.parse(rel)
            except UnknownRelationError:
                raise UnknownRelationError(rel, lineno) from None
            score = 1.0
            if len(parts) == 4 and parts[3].strip():
                try:
                    score = float(parts[3])
                except ValueError:
                    raise GraphFormatError(f"bad score {parts[3]!r}", lineno) from None
                if not 0.0 <= score <= 1.0:
                    raise GraphFormatError(f"score {score} outside [0, 1]", lineno)
            records.append((head, relation, tail, score))

    if scorer is not None:
        scores = scorer.score([(h, r, t) for h, r, t, _ in records])
        records = [(h, r, t, s) for (h, r, t, _), s in zip(records, scores)]

    g = KnowledgeGraph.from_triples(records)
    logger.info("loaded %s from %s", g, path)
    return g


@dataclass(frozen=True)
class GraphReport:
    num_nodes: int
    num_triples: int
    mean_degree: float
    mean_in_degree: float
    mean_out_degree: float
    degree_histogram: dict[int, int]
    in_degree_histogram: dict[int, int]
    out_degree_histogram: dict[int, int]
    convention: str = "undirected: degree(v) = in(v) + out(v); mean = 2|E|/|V|"

    def as_dict(self) -> dict:
        return {
            "convention": self.convention,
            "num_nodes": self.num_nodes,
            "num_triples": self.num_triples,
            "mean_degree": self.mean_degree,
            "mean_in_degree": self.mean_in_degree,
            "mean_out_degree": self.mean_out_degree,
            "degree_histogram": {str(k): v for k, v in self.degree_histogram.items()},
            "in_degree_histogram": {str(k): v for k, v in self.in_degree_histogram.items()},
            "out_degree_histogram": {str(k): v for k, v in self.out_degree_histogram.items()},
        }

    def format(self) -> str:
        lines = [
            f"# degree convention: {self.convention}",
            f"nodes\t{self.num_nodes}",
            f"triples\t{self.num_triples}",
            f"mean_degree\t{self.mean_degree:.4f}",
            f"mean_in_degree\t{self.mean_in_degree:.4f}",
            f"mean_out_degree\t{self.mean_out_degree:.4f}",
            "degree\tcount",
        ]
        lines += [f"{d}\t{c}" for d, c in self.degree_histogram.items()]
        return "\n".join(lines)


def graph_stats(g: KnowledgeGraph) -> GraphReport:
    n, m = g.num_nodes, g.num_triples
    indeg = [0] * n
    outdeg = [0] * n
    for h, _, t, _ in g.triples:
        outdeg[h] += 1
        indeg[t] += 1
    deg = [i + o for i, o in zip(indeg, outdeg)]

    def hist(values: list[int]) -> dict[int, int]:
        return dict(sorted(Counter(values).items()))

    return GraphReport(
        num_nodes=n,
        num_triples=m,
        mean_degree=2 * m / n if n else 0.0,
        mean_in_degree=m / n if n else 0.0,
        mean_out_degree=m / n if n else 0.0,
        degree_histogram=hist(deg),
        in_degree_histogram=hist(indeg),
        out_degree_histogram=hist(outdeg),
    )
