"""Write a random scored graph as TSV, handy for smoke runs and benchmarks."""

import argparse
import random

from cqforge.kg import Relation
from cqforge.synth import random_graph


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("output")
    ap.add_argument("--nodes", type=int, default=500)
    ap.add_argument("--edges", type=int, default=2500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--relations", default="", help="comma-separated subset, default all")
    args = ap.parse_args()

    rels = tuple(Relation.parse(r) for r in args.relations.split(",") if r) or None
    g = random_graph(random.Random(args.seed), args.nodes, args.edges, rels)
    g.write_tsv(args.output)
    print(f"{g.num_nodes} nodes, {g.num_triples} triples -> {args.output}")


if __name__ == "__main__":
    main()
