"""Command line entry point.

Every subcommand accepts ``--config FILE``, ``--set KEY=VALUE`` and one flag
per config key (``--merge.tau 0.9``). Precedence: flag > env > file > default.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from cqforge.config import ConfigError, RunConfig, config_keys, load_config
from cqforge.emit import read_jsonl, write_jsonl
from cqforge.kg import graph_stats, load_graph
from cqforge.normalization import merge_nodes, normalize_graph
from cqforge.pipeline import (
    GENERATIVE_FILE,
    MCQA_FILE,
    StageError,
    curate,
    emit_items,
    make_plausibility_provider,
    make_similarity_provider,
    run_pipeline,
    verbalize_results,
    verify_output,
)
from cqforge.plausibility import filter_by_plausibility
from cqforge.queries import AnswerSet, answer_query, batch_sample, instance_from_record, instance_to_record
from cqforge.verbalize import item_from_record, item_to_record

logger = logging.getLogger("cqforge")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("-v", "--verbose", action="count", default=0)
    grp = p.add_argument_group("config keys")
    for key in config_keys():
        if key in ("input", "output"):  # positional graph and -o cover these
            continue
        grp.add_argument(f"--{key}", dest=f"cfg:{key}", default=None, metavar="VALUE")


def _resolve(args: argparse.Namespace, **fixed) -> RunConfig:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    for name, value in vars(args).items():
        if name.startswith("cfg:") and value is not None:
            overrides[name[4:]] = value
    for key, value in fixed.items():
        if value is not None:
            overrides.setdefault(key, value)
    return load_config(args.config, overrides=overrides)


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False))


def cmd_load_stats(args) -> int:
    g = load_graph(args.graph)
    print(graph_stats(g).format())
    return 0


def cmd_normalize(args) -> int:
    cfg = _resolve(args)
    g = load_graph(args.graph)
    report = {}
    if cfg.merge.rules:
        g, nrep = normalize_graph(g)
        report["rules"] = {"nodes_before": nrep.nodes_before, "nodes_after": nrep.nodes_after,
                           "merged_fraction": nrep.merged_fraction}
    g, mm = merge_nodes(g, make_similarity_provider(cfg), cfg.merge.tau, cfg.merge.blocking)
    report["merge"] = mm.as_dict()
    g.write_tsv(args.output)
    _print_json(report)
    return 0


def cmd_filter(args) -> int:
    cfg = _resolve(args)
    g = load_graph(args.graph)
    g, rep = filter_by_plausibility(g, make_plausibility_provider(cfg), cfg.plausibility.threshold)
    g.write_tsv(args.output)
    _print_json(rep.as_dict())
    return 0


def cmd_sample(args) -> int:
    cfg = _resolve(args)
    g = load_graph(args.graph)
    results = batch_sample(g, cfg.mix, cfg.sample.seed, cfg.sample.cutoff, cfg.sample.retries, cfg.workers)
    n = write_jsonl(args.output, (json.dumps(instance_to_record(g, q, a), ensure_ascii=False, sort_keys=True)
                                  for q, a in results))
    logger.info("wrote %d instances to %s", n, args.output)
    return 0 if n >= sum(cfg.mix.values()) else 1


def cmd_verbalize(args) -> int:
    cfg = _resolve(args)
    g = load_graph(args.graph)
    results = []
    for rec in read_jsonl(args.instances):
        q = instance_from_record(g, rec)
        results.append((q, answer_query(g, q)))
    items, stats = verbalize_results(g, results, cfg)
    write_jsonl(args.output, (json.dumps(item_to_record(g, it), ensure_ascii=False, sort_keys=True) for it in items))
    _print_json(stats)
    return 1 if stats.get("dropped") else 0


def cmd_emit(args) -> int:
    cfg = _resolve(args)
    g = load_graph(args.graph)
    items = [item_from_record(g, rec) for rec in read_jsonl(args.items)]
    items, cstats = curate(items, cfg)
    pairs = emit_items(g, items, cfg)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / MCQA_FILE, (mc for mc, _ in pairs))
    write_jsonl(out / GENERATIVE_FILE, (gen for _, gen in pairs))
    _print_json({"curation": cstats, "records": len(pairs)})
    return 0


def cmd_run(args) -> int:
    cfg = _resolve(args, input=args.graph, output=args.output)
    report = run_pipeline(cfg)
    _print_json({"status": report.status, "files": report.files})
    return report.exit_code


def cmd_verify(args) -> int:
    rep = verify_output(args.output, brute_force=not args.no_brute_force)
    for msg in rep.failures:
        print("FAIL", msg)
    _print_json({"ok": rep.ok, "checked": rep.checked, "failures": len(rep.failures)})
    return 0 if rep.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cqforge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("load-stats", help="print node/triple counts and degree histograms")
    p.add_argument("graph")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=cmd_load_stats)

    p = sub.add_parser("normalize", help="rule-normalize tails and merge similar nodes")
    p.add_argument("graph")
    p.add_argument("-o", "--output", required=True, help="merged graph (TSV)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("filter", help="drop low-plausibility triples")
    p.add_argument("graph")
    p.add_argument("-o", "--output", required=True, help="filtered graph (TSV)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("sample", help="sample and answer query instances")
    p.add_argument("graph")
    p.add_argument("-o", "--output", required=True, help="instances (JSON lines)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("verbalize", help="attach distractors, contexts, questions and names")
    p.add_argument("graph")
    p.add_argument("instances")
    p.add_argument("-o", "--output", required=True, help="verbalized items (JSON lines)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_verbalize)

    p = sub.add_parser("emit", help="diversity-filter items and write MCQA/generative records")
    p.add_argument("graph")
    p.add_argument("items")
    p.add_argument("-o", "--output", required=True, help="output directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_emit)

    p = sub.add_parser("run", help="full pipeline")
    p.add_argument("graph", nargs="?", help="input graph (or set input in the config)")
    p.add_argument("-o", "--output", help="output directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="oracle re-check of an emitted dataset directory")
    p.add_argument("output")
    p.add_argument("--no-brute-force", action="store_true")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, StageError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
