"""End-to-end dataset construction and the oracle re-check of its output."""

from __future__ import annotations

import json
import logging
import random
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence, TypeVar

import yaml

from cqforge._http import TransportError
from cqforge.config import RunConfig
from cqforge.curation import diversity_filter
from cqforge.distractors import DistractorError, DistractorSet, sample_distractors
from cqforge.emit import (
    COMPACT_KINDS,
    NONE_OPTION,
    GenerativeRecord,
    MCQARecord,
    emit_generative,
    emit_mcqa,
    parse_compact_input,
    read_jsonl,
    record_id,
    write_jsonl,
)
from cqforge.kg import KnowledgeGraph, Relation, graph_stats, load_graph
from cqforge.normalization import (
    EmbeddingFileProvider,
    HttpEmbeddingProvider,
    SimilarityProvider,
    TokenJaccardProvider,
    merge_nodes,
    normalize_graph,
)
from cqforge.plausibility import (
    ConstantProvider,
    HttpPlausibilityProvider,
    PlausibilityProvider,
    ScoreTableProvider,
    filter_by_plausibility,
)
from cqforge.queries import (
    AnswerSet,
    BRUTE_FORCE_LIMIT,
    QueryInstance,
    answer_query,
    answer_stats,
    batch_sample,
    brute_force_answers,
    derive_rng,
    instance_from_record,
    instance_to_record,
)
from cqforge.textutil import load_stopwords
from cqforge.verbalize import (
    LLM_KINDS,
    HttpTextClient,
    MalformedResponse,
    TextGenerationClient,
    VerbalizedItem,
    load_names,
    sample_name_assignment,
    substitute_names,
    verbalize_context_llm,
    verbalize_item,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

GRAPH_FILE = "graph.tsv"
INSTANCES_FILE = "instances.jsonl"
MCQA_FILE = "mcqa.jsonl"
GENERATIVE_FILE = "generative.jsonl"
REPORT_FILE = "report.json"
CONFIG_FILE = "config.yaml"

# knobs that change how a run executes but never what it writes
EXECUTION_ONLY_KEYS = ("output", "workers")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException, item: Optional[object] = None):
        self.stage = stage
        self.cause = cause
        self.item = item
        where = f" (item {item})" if item is not None else ""
        super().__init__(f"stage {stage!r} failed{where}: {cause}")


@contextmanager
def _stage(name: str) -> Iterator[None]:
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    logger.info("stage %s done in %.2fs", name, time.perf_counter() - t0)


def _pmap(fn: Callable[[T], R], items: Sequence[T], workers: int) -> list[R]:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def make_similarity_provider(cfg: RunConfig) -> SimilarityProvider:
    m = cfg.merge
    if m.provider == "file":
        return EmbeddingFileProvider(m.embeddings, missing=m.missing)
    if m.provider == "http":
        return HttpEmbeddingProvider(m.endpoint)
    return TokenJaccardProvider()


def make_plausibility_provider(cfg: RunConfig) -> Optional[PlausibilityProvider]:
    p = cfg.plausibility
    if p.provider == "constant":
        return ConstantProvider(p.default_score)
    if p.provider == "file":
        return ScoreTableProvider.from_file(p.scores, p.default_score)
    if p.provider == "http":
        return HttpPlausibilityProvider(p.endpoint)
    return None


@dataclass
class RunReport:
    status: str
    stats: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return {"success": 0, "partial": 1}.get(self.status, 2)


def prepare_graph(cfg: RunConfig, stats: dict) -> KnowledgeGraph:
    """load -> normalize -> merge -> plausibility filter."""
    with _stage("load"):
        if not cfg.input:
            raise ValueError("no input graph configured (input)")
        g = load_graph(cfg.input)
        stats["graph_loaded"] = graph_stats(g).as_dict()
    if cfg.merge.enabled and cfg.merge.rules:
        with _stage("normalize"):
            g, nrep = normalize_graph(g)
            stats["normalize"] = {
                "nodes_before": nrep.nodes_before,
                "nodes_after": nrep.nodes_after,
                "tails_rewritten": nrep.tails_rewritten,
                "merged_fraction": nrep.merged_fraction,
            }
    if cfg.merge.enabled:
        with _stage("merge"):
            g, mm = merge_nodes(g, make_similarity_provider(cfg), cfg.merge.tau, cfg.merge.blocking)
            stats["merge"] = mm.as_dict()
    if cfg.plausibility.enabled:
        with _stage("filter"):
            g, rrep = filter_by_plausibility(g, make_plausibility_provider(cfg), cfg.plausibility.threshold)
            stats["filter"] = rrep.as_dict()
    stats["graph_final"] = graph_stats(g).as_dict()
    return g


def densification_summary(stats: dict) -> dict:
    """Percentages worth comparing across graphs, from ``prepare_graph`` stats.

    ``merged_pct`` counts nodes removed by rule normalization and similarity
    merging together, against the loaded node count.
    """
    loaded = stats["graph_loaded"]
    out: dict = {"nodes_loaded": loaded["num_nodes"], "triples_loaded": loaded["num_triples"]}
    if "merge" in stats:
        after = stats["merge"]["nodes_after"]
        out["merged_pct"] = 100.0 * (loaded["num_nodes"] - after) / max(loaded["num_nodes"], 1)
        before_deg = loaded["mean_degree"]
        out["degree_increase_pct"] = (
            100.0 * (stats["merge"]["degree_after"] - before_deg) / before_deg if before_deg else 0.0
        )
    if "filter" in stats:
        out["filtered_pct"] = 100.0 * stats["filter"]["removed_fraction"]
    return out


@dataclass
class _Draft:
    index: int
    q: QueryInstance
    ans: AnswerSet
    seed: int
    distractors: Optional[DistractorSet] = None
    names: dict = field(default_factory=dict)
    context: Optional[str] = None
    context_source: str = "rule"
    dropped: Optional[str] = None


def _item_seed(seed: int, index: int) -> int:
    return derive_rng(seed, "item", index).getrandbits(63)


def verbalize_results(
    g: KnowledgeGraph,
    results: Sequence[tuple[QueryInstance, AnswerSet]],
    cfg: RunConfig,
    client: Optional[TextGenerationClient] = None,
) -> tuple[list[VerbalizedItem], dict]:
    """distractors -> contexts (rule or LLM) -> questions and names.

    Item ``i`` draws all its randomness from a seed derived from
    (``sample.seed``, i), so items are independent of each other and of the
    worker count.
    """
    stats: dict = {}
    workers = cfg.workers
    drafts = [_Draft(i, q, ans, _item_seed(cfg.sample.seed, i)) for i, (q, ans) in enumerate(results)]

    with _stage("distractors"):
        stop = load_stopwords(cfg.distractors.stopwords)
        names = load_names(cfg.verbalize.names)

        def pick(d: _Draft) -> _Draft:
            rng = random.Random(d.seed)
            try:
                d.distractors = sample_distractors(
                    g, d.q, d.ans, rng, cfg.distractors.random_count, cfg.distractors.adversarial_count, stop
                )
            except DistractorError as exc:
                d.dropped = f"distractors: {exc}"
                return d
            d.names = sample_name_assignment(rng, names)
            return d

        drafts = _pmap(pick, drafts, workers)

    if cfg.verbalize.mode != "rule":
        with _stage("verbalize-llm"):
            stats["llm"] = _llm_contexts(g, drafts, cfg, client or HttpTextClient(cfg.verbalize.endpoint))

    with _stage("verbalize"):
        live = [d for d in drafts if d.dropped is None]

        def render(d: _Draft) -> VerbalizedItem:
            return verbalize_item(
                g, d.index, d.q, d.ans, d.distractors.nodes, random.Random(d.seed), names,
                context=d.context, context_source=d.context_source, assignment=d.names, seed=d.seed,
            )

        items = _pmap(render, live, workers)
        dropped: dict[str, int] = {}
        for d in drafts:
            if d.dropped:
                reason = d.dropped.split(":")[0]
                dropped[reason] = dropped.get(reason, 0) + 1
        stats["dropped"] = dropped
    return items, stats


def _llm_contexts(g: KnowledgeGraph, drafts: list[_Draft], cfg: RunConfig, client: TextGenerationClient) -> dict:
    todo = [d for d in drafts if d.dropped is None and d.q.kind in LLM_KINDS]

    def ask(d: _Draft) -> _Draft:
        last: Optional[Exception] = None
        for _ in range(cfg.verbalize.retries + 1):
            try:
                d.context = verbalize_context_llm(g, d.q, client, d.names)
                d.context_source = "llm"
                return d
            except (TransportError, MalformedResponse) as exc:
                last = exc
        if cfg.verbalize.mode == "llm":
            raise StageError("verbalize-llm", last, d.index)
        return d

    _pmap(ask, todo, cfg.verbalize.max_inflight)
    stats = {"requested": len(todo), "accepted": 0, "rejected": 0, "fallback": 0}
    for d in todo:
        if d.context is not None:
            stats["accepted"] += 1
        elif cfg.verbalize.mode == "llm":
            stats["rejected"] += 1
            d.dropped = "llm: NA or invalid response"
        else:
            stats["fallback"] += 1
            d.context_source = "rule-fallback"
    return stats


def curate(items: list[VerbalizedItem], cfg: RunConfig) -> tuple[list[VerbalizedItem], dict]:
    with _stage("curation"):
        before = len(items)
        if cfg.curation.enabled:
            items, _ = diversity_filter(items, cfg.curation.k)
            items.sort(key=lambda it: it.item_id)
        return items, {"enabled": cfg.curation.enabled, "k": cfg.curation.k, "before": before, "after": len(items)}


def emit_items(
    g: KnowledgeGraph, items: Sequence[VerbalizedItem], cfg: RunConfig
) -> list[tuple[MCQARecord, GenerativeRecord]]:
    with _stage("emit"):
        def emit(it: VerbalizedItem) -> tuple[MCQARecord, GenerativeRecord]:
            mc = emit_mcqa(g, it, derive_rng(it.seed, "emit"))
            mode = cfg.emit.generative_mode
            if mode == "auto":
                mode = "compact" if it.instance.kind in COMPACT_KINDS else "verbalized"
            return mc, emit_generative(g, it.instance, it.answers, mode, it, it.seed)

        return _pmap(emit, items, cfg.workers)


def resolved_config_yaml(cfg: RunConfig) -> str:
    resolved = cfg.to_dict()
    for key in EXECUTION_ONLY_KEYS:
        resolved.pop(key, None)
    resolved["verbalize"].pop("max_inflight", None)
    return yaml.safe_dump(resolved, sort_keys=True, allow_unicode=True)


def run_pipeline(cfg: RunConfig, client: Optional[TextGenerationClient] = None) -> RunReport:
    """Build the datasets described by ``cfg`` and write them to ``cfg.output``.

    Outputs depend only on the input files and the non-execution config keys;
    worker counts change speed, not bytes.
    """
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    stats: dict = {}
    g = prepare_graph(cfg, stats)

    with _stage("sample"):
        mix = cfg.mix
        results = batch_sample(g, mix, cfg.sample.seed, cfg.sample.cutoff, cfg.sample.retries, cfg.workers)
        got = {k.value: 0 for k in mix}
        for q, _ in results:
            got[q.kind.value] += 1
        stats["sample"] = {
            "requested": {k.value: v for k, v in mix.items()},
            "sampled": got,
            "answer_stats": {k: vars(v) for k, v in answer_stats(results).items()},
        }
    shortfall = any(got[k.value] < v for k, v in mix.items())

    items, vstats = verbalize_results(g, results, cfg, client)
    stats.update(vstats)
    items, stats["curation"] = curate(items, cfg)
    pairs = emit_items(g, items, cfg)

    with _stage("write"):
        g.write_tsv(out / GRAPH_FILE)
        files = {
            GRAPH_FILE: g.num_triples,
            INSTANCES_FILE: write_jsonl(
                out / INSTANCES_FILE,
                (json.dumps(instance_to_record(g, q, a), ensure_ascii=False, sort_keys=True) for q, a in results),
            ),
            MCQA_FILE: write_jsonl(out / MCQA_FILE, (mc for mc, _ in pairs)),
            GENERATIVE_FILE: write_jsonl(out / GENERATIVE_FILE, (gen for _, gen in pairs)),
        }
        (out / CONFIG_FILE).write_text(resolved_config_yaml(cfg), encoding="utf-8")
        status = "partial" if shortfall or stats["dropped"] else "success"
        (out / REPORT_FILE).write_text(
            json.dumps({"status": status, "stats": stats, "files": files}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    return RunReport(status, stats, files)


# --- verification -------------------------------------------------------------------


@dataclass
class VerifyReport:
    checked: dict = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def fail(self, msg: str) -> None:
        self.failures.append(msg)


def verify_output(out_dir: str | Path, brute_force: bool = True) -> VerifyReport:
    """Re-check an emitted dataset against the graph it was built from.

    Every query's stored answers must equal a fresh evaluation (and the
    brute-force oracle when the graph is small enough), provenance triples must
    exist, the seed must be an answer, and no distractor may be an answer.
    """
    out = Path(out_dir)
    g = load_graph(out / GRAPH_FILE)
    rep = VerifyReport()
    n = g.num_nodes

    def check_query(tag: str, rec: dict) -> Optional[tuple[QueryInstance, AnswerSet]]:
        try:
            q = instance_from_record(g, rec)
        except (KeyError, ValueError) as exc:
            rep.fail(f"{tag}: cannot rebuild query ({exc})")
            return None
        for h, r, t in rec["provenance"]:
            if h not in g or t not in g or not g.has_edge(g.node_id(h), Relation.parse(r), g.node_id(t)):
                rep.fail(f"{tag}: provenance triple missing from graph: {(h, r, t)}")
        ans = answer_query(g, q)
        if sorted(g.text(a) for a in ans.answers) != sorted(rec["answers"]):
            rep.fail(f"{tag}: stored answers differ from evaluation")
        if q.seed_answer not in ans:
            rep.fail(f"{tag}: seed answer not in answer set")
        free = 1 + len(q.structure.existentials)
        if brute_force and n ** free <= min(BRUTE_FORCE_LIMIT, 10**6):
            if brute_force_answers(g, q).answers != ans.answers:
                rep.fail(f"{tag}: evaluation disagrees with brute-force oracle")
        return q, ans

    instances = read_jsonl(out / INSTANCES_FILE)
    for i, rec in enumerate(instances):
        check_query(f"instance {i}", rec)

    mcqa = [MCQARecord(**r) for r in read_jsonl(out / MCQA_FILE)]
    for rec in mcqa:
        tag = f"mcqa {rec.id}"
        res = check_query(tag, rec.provenance)
        if len(rec.options) != 5 or rec.options[4] != NONE_OPTION:
            rep.fail(f"{tag}: option E must be the sentinel")
        if not 0 <= rec.label <= 3:
            rep.fail(f"{tag}: label {rec.label} outside A-D")
        if len({o.strip().lower() for o in rec.options}) != len(rec.options):
            rep.fail(f"{tag}: options not distinct")
        if record_id(rec.provenance["provenance"], rec.kind, rec.provenance["seed"]) != rec.id:
            rep.fail(f"{tag}: id does not match content hash")
        names = rec.provenance.get("names", {})
        if res is not None:
            q, ans = res
            if rec.options[rec.label] != substitute_names(g.text(q.seed_answer), names):
                rep.fail(f"{tag}: labelled option is not the gold answer")
            for d in rec.provenance.get("candidate_distractors", []):
                if d not in g:
                    rep.fail(f"{tag}: distractor {d!r} not a graph node")
                elif g.node_id(d) in ans:
                    rep.fail(f"{tag}: distractor {d!r} is an answer")
            if not all(substitute_names(d, names) in rec.options for d in rec.provenance.get("distractors", [])):
                rep.fail(f"{tag}: emitted distractors missing from options")

    gens = [GenerativeRecord(**r) for r in read_jsonl(out / GENERATIVE_FILE)]
    lexicon = set(g.texts)
    for rec in gens:
        tag = f"generative {rec.id}"
        check_query(tag, rec.provenance)
        if rec.mode == "compact":
            try:
                anchors, rels = parse_compact_input(rec.input, rec.kind, lexicon)
            except ValueError as exc:
                rep.fail(f"{tag}: compact input does not parse ({exc})")
                continue
            if anchors != rec.provenance["anchors"] or [r.value for r in rels] != rec.provenance["relations"]:
                rep.fail(f"{tag}: compact input does not round-trip")

    rep.checked = {"instances": len(instances), "mcqa": len(mcqa), "generative": len(gens)}
    return rep
