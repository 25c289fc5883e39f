#!/usr/bin/env python3
"""Write a seeded synthetic dataset in the line-delimited JSON layout.

Produces users.jsonl, items.jsonl, interactions.jsonl, explanation
train/test splits over sampled interactions, and labels.json with block
assignments and planted paths.  The same seed always writes the same bytes,
so the output doubles as a determinism fixture.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from whyrec import item, user
from whyrec.harness import SyntheticSpec, generate_synthetic, synthesize_explanations


def parse_blocks(text):
    try:
        sizes = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated int list: {text!r}")
    if not sizes or any(n < 1 for n in sizes):
        raise argparse.ArgumentTypeError("block sizes must be positive")
    return sizes


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--block-users", type=parse_blocks, default=(12, 12))
    parser.add_argument("--block-items", type=parse_blocks, default=(12, 12))
    parser.add_argument("--within", type=float, default=0.3)
    parser.add_argument("--cross", type=float, default=0.02)
    parser.add_argument("--train", type=int, default=20,
                        help="training explanation pairs to sample")
    parser.add_argument("--test", type=int, default=5,
                        help="test explanation pairs to sample")
    args = parser.parse_args(argv)

    spec = SyntheticSpec(
        block_users=args.block_users,
        block_items=args.block_items,
        within_density=args.within,
        cross_density=args.cross,
        seed=args.seed,
    )
    graph, labels = generate_synthetic(spec)

    edges = list(graph.edges())
    wanted = args.train + args.test
    if wanted > len(edges):
        print(f"error: asked for {wanted} explanation pairs but the graph has "
              f"only {len(edges)} interactions; lower --train/--test or raise "
              f"--within", file=sys.stderr)
        return 1
    order = np.random.default_rng(args.seed).permutation(len(edges))
    train_pairs = [edges[k] for k in order[:args.train]]
    test_pairs = [edges[k] for k in order[args.train:wanted]]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "users.jsonl", (
        {"id": graph.node_id(user(k)), "profile": graph.profile(user(k))}
        for k in range(graph.user_count)
    ))
    write_jsonl(out / "items.jsonl", (
        {"id": graph.node_id(item(k)), "title": graph.title(item(k)),
         "profile": graph.profile(item(k))}
        for k in range(graph.item_count)
    ))
    write_jsonl(out / "interactions.jsonl", (
        {"user": graph.node_id(user(u)), "item": graph.node_id(item(i))}
        for u, i in edges
    ))
    write_jsonl(out / "explanations_train.jsonl", (
        {"user": u, "item": i, "explanation": text}
        for u, i, text in synthesize_explanations(graph, train_pairs, seed=args.seed)
    ))
    write_jsonl(out / "explanations_test.jsonl", (
        {"user": u, "item": i, "explanation": text}
        for u, i, text in synthesize_explanations(graph, test_pairs, seed=args.seed + 1)
    ))
    (out / "labels.json").write_text(
        json.dumps(labels, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    print(f"wrote {graph.user_count} users, {graph.item_count} items, "
          f"{graph.edge_count} interactions to {out}")
    print(f"explanations: {len(train_pairs)} train, {len(test_pairs)} test")
    return 0


if __name__ == "__main__":
    sys.exit(main())
