#!/usr/bin/env python3
"""End-to-end demo: generate a synthetic library, label it with the synthetic
oracle, train the surrogate and the hierarchy factorizer, precompute the
contribution table, then run a constrained top-k search and evaluate recall.

All stages go through the CLI so the artifacts on disk match what the
command-line pipeline produces.
"""

import argparse
import json
import pathlib
import sys

from apexcsl import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="pipeline_out")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--reactions", type=int, default=4)
    ap.add_argument("--synthons", type=int, default=12)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--k", type=int, default=100)
    args = ap.parse_args()

    d = pathlib.Path(args.workdir)
    d.mkdir(parents=True, exist_ok=True)
    library = d / "library.csl"
    labels = d / "labels.tsv"
    oracle = d / "oracle.json"
    surrogate = d / "surrogate.blob"
    factorizer = d / "factorizer.blob"
    table = d / "table.blob"
    query = d / "query.json"
    hits = d / "hits.tsv"
    evaluation = d / "evaluation.tsv"

    query.write_text(json.dumps({
        "objective": {"task": "dock_a", "direction": "maximize"},
        "constraints": [{"preset": "lipinski"}],
        "k": args.k,
    }, indent=2))

    stages = [
        ["generate", "--out", str(library), "--reactions", str(args.reactions),
         "--synthons", str(args.synthons), "--seed", str(args.seed)],
        ["label", "--library", str(library), "--out", str(labels),
         "--oracle-out", str(oracle), "--seed", str(args.seed)],
        ["train-surrogate", "--library", str(library), "--labels", str(labels),
         "--out", str(surrogate), "--epochs", str(args.epochs), "--seed", str(args.seed)],
        ["train-factorizer", "--library", str(library), "--surrogate", str(surrogate),
         "--out", str(factorizer), "--steps", str(args.steps), "--seed", str(args.seed)],
        ["precompute", "--library", str(library), "--surrogate", str(surrogate),
         "--factorizer", str(factorizer), "--out", str(table)],
        ["search", "--library", str(library), "--table", str(table),
         "--query", str(query), "--out", str(hits), "--assemble"],
        ["evaluate", "--library", str(library), "--table", str(table),
         "--oracle", str(oracle), "--query", str(query), "--out", str(evaluation),
         "--j", "10,100"],
        ["cost", "--library", str(library)],
    ]
    for argv in stages:
        print(f"==> apexcsl {' '.join(argv)}")
        rc = cli.main(argv)
        if rc != 0:
            return rc
    print(f"done; artifacts in {d}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
