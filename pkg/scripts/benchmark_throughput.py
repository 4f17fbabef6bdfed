#!/usr/bin/env python3
"""Measure single-threaded scan throughput of both retrieval variants on a
synthetic 3-component library with a random contribution table."""

import argparse
import sys

import numpy as np

from apexcsl import csl, engine


def random_table(library, task_names, rng):
    member_ids, rg_offsets, rg_ids = [], [0], []
    for rg in library.iter_rgroups():
        rg_ids.append(rg.rgroup_id)
        member_ids.extend(rg.synthon_ids)
        rg_offsets.append(len(member_ids))
    return engine.ContributionTable(
        values=rng.standard_normal((len(task_names), len(member_ids))).astype(np.float32),
        biases=np.zeros(len(task_names)),
        task_names=list(task_names),
        member_ids=np.asarray(member_ids),
        rg_offsets=np.asarray(rg_offsets),
        rg_ids=np.asarray(rg_ids),
        fingerprint=csl.library_fingerprint(library),
    )


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--synthons", type=int, default=200, help="per R-group; products = synthons^3")
    ap.add_argument("--k", type=int, default=100)
    ap.add_argument("--constraints", type=int, default=0, help="number of active constraint tasks")
    ap.add_argument("--chunk-size", type=int, default=1 << 20)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    library = csl.generate_synthetic(
        csl.SyntheticConfig(n_reactions=1, components=(3,), synthons_per_rgroup=args.synthons),
        seed=args.seed,
    )
    total = csl.product_count(library)
    rng = np.random.default_rng(args.seed)
    tasks = ["obj"] + [f"c{i}" for i in range(args.constraints)]
    table = random_table(library, tasks, rng)
    constraints = tuple(engine.Constraint(f"c{i}", upper=0.0) for i in range(args.constraints))
    query = engine.QuerySpec("obj", "maximize", constraints, k=args.k)

    print(f"library: {total} products, k={args.k}, {args.constraints} constraints")
    for name, run in (
        ("stream", lambda: engine.search_topk_stream(library, table, query)),
        ("batched", lambda: engine.search_topk_batched(library, table, query, args.chunk_size)),
    ):
        rates = []
        for _ in range(args.repeats):
            result = run()
            rates.append(result.timing.get("products_per_second", 0.0))
        print(f"{name:8s} best {max(rates):.3g} products/s "
              f"(median {np.median(rates):.3g} over {args.repeats} runs)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
