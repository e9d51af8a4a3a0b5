"""Time answer_query against the brute-force oracle on random graphs.

Exits non-zero on the first disagreement.
"""

import argparse
import random
import sys
import time
from collections import Counter

from cqforge.queries import QueryKind, answer_query, brute_force_answers, sample_query
from cqforge.synth import random_graph


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--graphs", type=int, default=200)
    ap.add_argument("--max-nodes", type=int, default=200)
    ap.add_argument("--max-edges", type=int, default=1000)
    ap.add_argument("--per-kind", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    t_eval = t_oracle = 0.0
    per_kind = Counter()
    for _ in range(args.graphs):
        n = rng.randint(5, args.max_nodes)
        g = random_graph(random.Random(rng.getrandbits(32)), n, rng.randint(n, args.max_edges))
        for kind in QueryKind:
            for _ in range(args.per_kind):
                q = sample_query(g, kind, rng)
                if q is None:
                    continue
                t0 = time.perf_counter()
                fast = answer_query(g, q)
                t1 = time.perf_counter()
                slow = brute_force_answers(g, q)
                t2 = time.perf_counter()
                t_eval += t1 - t0
                t_oracle += t2 - t1
                if fast.answers != slow.answers:
                    print(f"mismatch on {q}", file=sys.stderr)
                    return 1
                per_kind[kind.value] += 1
    total = sum(per_kind.values())
    print(f"{total} instances agree ({dict(sorted(per_kind.items()))})")
    print(f"answer_query {t_eval:.3f}s, brute force {t_oracle:.3f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
