"""Graph densification: tail normalization and similarity-based node merging."""

from __future__ import annotations

import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Optional, Sequence

import numpy as np

from cqforge._http import post_json
from cqforge.kg import KnowledgeGraph, Relation, Triple, graph_stats
from cqforge.textutil import content_tokens, unigrams

logger = logging.getLogger(__name__)

EXACT_PAIRWISE_LIMIT = 50_000

_STRIP_TO = {Relation.xWant, Relation.oWant, Relation.xIntent, Relation.xNeed}
_PREPEND = {Relation.xEffect, Relation.oEffect}
_PREPEND_IS = {Relation.xReact, Relation.oReact, Relation.xAttr}
_LEADING_TO = re.compile(r"^to\s+", re.IGNORECASE)
_HAS_SUBJECT = re.compile(r"^Person[XY]\b")


def subject_for(rel: Relation) -> str:
    """PersonY for the o* relations, PersonX otherwise."""
    return "PersonY" if rel in (Relation.oEffect, Relation.oReact, Relation.oWant) else "PersonX"


def normalize_tail(text: str, rel: Relation, subject: str = "PersonX") -> str:
    """Turn a subjectless tail phrase into a full event sentence.

    The rule is applied literally, without conjugating the verb:
    ``("to say sorry", xWant)`` becomes ``"PersonX say sorry"``.
    """
    text = text.strip()
    if _HAS_SUBJECT.match(text):
        return text
    if rel in _STRIP_TO:
        return f"{subject} {_LEADING_TO.sub('', text, count=1)}"
    if rel in _PREPEND:
        return f"{subject} {text}"
    if rel in _PREPEND_IS:
        return f"{subject} is {text}"
    return text


@dataclass(frozen=True)
class NormalizationReport:
    nodes_before: int
    nodes_after: int
    tails_rewritten: int

    @property
    def merged_fraction(self) -> float:
        return (self.nodes_before - self.nodes_after) / self.nodes_before if self.nodes_before else 0.0


def normalize_graph(g: KnowledgeGraph) -> tuple[KnowledgeGraph, NormalizationReport]:
    """Rewrite every tail with :func:`normalize_tail`; identical results become one node."""
    rewritten = 0
    records = []
    for h, r, t, p in g.text_triples():
        nt = normalize_tail(t, r, subject_for(r))
        rewritten += nt != t
        records.append((h, r, nt, p))
    # self-loops can appear when a rewritten tail equals its head
    records = [rec for rec in records if rec[0] != rec[2]]
    out = KnowledgeGraph.from_triples(records)
    return out, NormalizationReport(g.num_nodes, out.num_nodes, rewritten)


# --- similarity providers ---------------------------------------------------


class ProviderError(RuntimeError):
    def __init__(self, message: str, text: Optional[str] = None):
        self.text = text
        super().__init__(message if text is None else f"{message}: {text!r}")


class SimilarityProvider:
    """Pairwise text similarity. Subclasses supply vectors via :meth:`embed`;
    similarity is the cosine of those vectors."""

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        raise NotImplementedError

    def similarity(self, a: str, b: str) -> float:
        v = _unit(self.embed([a, b]))
        return float(v[0] @ v[1])

    def pairs_above(self, texts: Sequence[str], tau: float, candidates: Optional[Iterable[tuple[int, int]]] = None,
                    block_rows: int = 1024) -> list[tuple[int, int]]:
        """All index pairs (i < j) with similarity >= tau.

        Without ``candidates`` every pair is checked exactly, in row blocks.
        """
        vecs = _unit(self.embed(texts))
        valid = np.linalg.norm(vecs, axis=1) > 0
        if candidates is not None:
            out = []
            for i, j in candidates:
                if valid[i] and valid[j] and float(vecs[i] @ vecs[j]) >= tau - 1e-12:
                    out.append((min(i, j), max(i, j)))
            return sorted(set(out))
        out = []
        n = len(texts)
        for start in range(0, n, block_rows):
            block = vecs[start:start + block_rows] @ vecs.T
            rows, cols = np.nonzero(block >= tau - 1e-12)
            for r, c in zip(rows.tolist(), cols.tolist()):
                i = start + r
                if i < c and valid[i] and valid[c]:
                    out.append((i, c))
        return out


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return np.divide(v, norms, out=np.zeros_like(v), where=norms > 0)


class EmbeddingFileProvider(SimilarityProvider):
    """Precomputed vectors from a ``text<TAB>f1,f2,...`` file.

    ``missing="skip"`` gives unknown texts a zero vector, so they never merge.
    """

    def __init__(self, path: str | Path, missing: Literal["error", "skip"] = "error"):
        self.missing = missing
        self.table: dict[str, np.ndarray] = {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\r\n")
                if not line or line.startswith("#"):
                    continue
                text, sep, vec = line.rpartition("\t")
                if not sep:
                    raise ProviderError(f"{path}:{lineno}: expected text<TAB>vector")
                self.table[text.strip()] = np.array([float(x) for x in vec.split(",")])
        self.dim = len(next(iter(self.table.values()))) if self.table else 0

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for i, t in enumerate(texts):
            v = self.table.get(t.strip())
            if v is None:
                if self.missing == "error":
                    raise ProviderError("no embedding for node", t)
                continue
            out[i] = v
        return out


class HttpEmbeddingProvider(SimilarityProvider):
    """POST ``{"texts": [...]}`` and expect ``{"vectors": [[...], ...]}`` of equal length."""

    def __init__(self, url: str, batch_size: int = 256, timeout: float = 60.0):
        self.url = url
        self.batch_size = batch_size
        self.timeout = timeout

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        rows = []
        for start in range(0, len(texts), self.batch_size):
            batch = list(texts[start:start + self.batch_size])
            resp = post_json(self.url, {"texts": batch}, self.timeout)
            vecs = resp.get("vectors")
            if not isinstance(vecs, list) or len(vecs) != len(batch):
                raise ProviderError("embedding endpoint returned a mismatched batch", batch[0] if batch else None)
            rows.extend(vecs)
        return np.asarray(rows, dtype=np.float64).reshape(len(texts), -1)


class TokenJaccardProvider(SimilarityProvider):
    """Offline stand-in: Jaccard overlap of lowercased word tokens.

    Punctuation is ignored, so "buys a ticket" and "buys a ticket ." score 1.0.
    """

    def similarity(self, a: str, b: str) -> float:
        sa, sb = set(unigrams(a)), set(unigrams(b))
        if not sa and not sb:
            return 1.0 if a.strip() == b.strip() else 0.0
        return len(sa & sb) / len(sa | sb)

    def pairs_above(self, texts, tau, candidates=None, block_rows=0):
        toks = [frozenset(unigrams(t)) for t in texts]
        if candidates is None:
            # any pair with Jaccard > 0 shares a token, so token buckets are exact here
            buckets: dict[str, list[int]] = defaultdict(list)
            for i, ts in enumerate(toks):
                for tok in ts:
                    buckets[tok].append(i)
            candidates = {(a, b) for ids in buckets.values() for k, a in enumerate(ids) for b in ids[k + 1:]}
            empties = [i for i, ts in enumerate(toks) if not ts]
            candidates |= {(a, b) for k, a in enumerate(empties) for b in empties[k + 1:]}
        out = set()
        for i, j in candidates:
            if i != j and self.similarity(texts[i], texts[j]) >= tau:
                out.add((min(i, j), max(i, j)))
        return sorted(out)


# --- merging ----------------------------------------------------------------


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)

    def groups(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = defaultdict(list)
        for x in range(len(self.parent)):
            out[self.find(x)].append(x)
        return out


@dataclass
class MergeMap:
    """Outcome of a merge pass.

    ``representative`` maps each input node id to the input id of its
    canonical node; ``new_id`` maps input ids to ids in the merged graph.
    """

    representative: dict[int, int]
    new_id: dict[int, int]
    merged_count: int
    nodes_before: int
    nodes_after: int
    degree_before: float
    degree_after: float
    dropped_self_loops: int = 0
    collapsed_edges: int = 0
    groups: list[list[int]] = field(default_factory=list)

    def rep(self, node: int) -> int:
        return self.representative[node]

    @property
    def merged_fraction(self) -> float:
        return self.merged_count / self.nodes_before if self.nodes_before else 0.0

    @property
    def degree_increase(self) -> float:
        """Relative change in mean degree (0.253 means +25.3%)."""
        return (self.degree_after - self.degree_before) / self.degree_before if self.degree_before else 0.0

    def as_dict(self) -> dict:
        return {
            "nodes_before": self.nodes_before,
            "nodes_after": self.nodes_after,
            "merged_count": self.merged_count,
            "merged_fraction": self.merged_fraction,
            "degree_before": self.degree_before,
            "degree_after": self.degree_after,
            "degree_increase": self.degree_increase,
            "dropped_self_loops": self.dropped_self_loops,
            "collapsed_edges": self.collapsed_edges,
        }


def blocking_candidates(texts: Sequence[str], max_bucket: int = 5000) -> set[tuple[int, int]]:
    """Pairs of nodes sharing at least one content token.

    Buckets larger than ``max_bucket`` are skipped; such tokens are too common
    to be informative and would make blocking quadratic again.
    """
    buckets: dict[str, list[int]] = defaultdict(list)
    for i, t in enumerate(texts):
        for tok in content_tokens(t):
            buckets[tok].append(i)
    pairs = set()
    for ids in buckets.values():
        if len(ids) > max_bucket:
            continue
        for k, a in enumerate(ids):
            for b in ids[k + 1:]:
                pairs.add((a, b))
    return pairs


def merge_nodes(
    g: KnowledgeGraph,
    sim: SimilarityProvider,
    tau: float = 0.95,
    blocking: Literal["auto", "exact", "tokens"] = "auto",
) -> tuple[KnowledgeGraph, MergeMap]:
    """Merge nodes whose similarity reaches ``tau`` (transitively).

    Each merged group is represented by its highest-degree member, ties going
    to the smallest id. Edges are re-pointed to representatives, self-loops
    created by merging are dropped and parallel edges collapse to one,
    keeping the highest plausibility.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    texts = g.texts
    n = len(texts)
    use_blocking = blocking == "tokens" or (blocking == "auto" and n > EXACT_PAIRWISE_LIMIT)
    candidates = blocking_candidates(texts) if use_blocking else None
    pairs = sim.pairs_above(texts, tau, candidates) if n > 1 else []

    uf = UnionFind(n)
    for i, j in pairs:
        uf.union(i, j)

    degree = g.degrees()
    representative: dict[int, int] = {}
    groups = []
    for members in uf.groups().values():
        rep = min(members, key=lambda x: (-degree[x], x))
        for m in members:
            representative[m] = rep
        if len(members) > 1:
            groups.append(sorted(members))
    groups.sort()

    reps = sorted(set(representative.values()))
    new_of_rep = {r: k for k, r in enumerate(reps)}
    new_id = {x: new_of_rep[representative[x]] for x in range(n)}

    best: dict[tuple[int, Relation, int], float] = {}
    loops = 0
    for h, r, t, p in g.triples:
        nh, nt = new_id[h], new_id[t]
        if nh == nt:
            loops += 1
            continue
        key = (nh, r, nt)
        if key not in best or p > best[key]:
            best[key] = p
    collapsed = g.num_triples - loops - len(best)
    out = KnowledgeGraph([texts[r] for r in reps], [Triple(h, r, t, p) for (h, r, t), p in best.items()])

    mm = MergeMap(
        representative=representative,
        new_id=new_id,
        merged_count=n - len(reps),
        nodes_before=n,
        nodes_after=len(reps),
        degree_before=graph_stats(g).mean_degree,
        degree_after=graph_stats(out).mean_degree,
        dropped_self_loops=loops,
        collapsed_edges=collapsed,
        groups=groups,
    )
    logger.info("merged %d of %d nodes (tau=%.3f)", mm.merged_count, n, tau)
    return out, mm
