#!/usr/bin/env python3
"""Convert Cora into the dataset JSON read by fedgcv.

Accepts either the LINQS release (cora.content + cora.cites) or the Planetoid
pickles (ind.cora.{x,tx,allx,y,ty,ally,graph,test.index}). Nodes get a seeded
20/20/60 train/val/test split.
"""

import argparse
import json
import pickle
import sys
from pathlib import Path

import numpy as np


def load_linqs(root):
    ids, feats, names = [], [], []
    for line in (root / "cora.content").read_text().split("\n"):
        if not line.strip():
            continue
        parts = line.split()
        ids.append(parts[0])
        feats.append([float(v) for v in parts[1:-1]])
        names.append(parts[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    classes = sorted(set(names))
    labels = [classes.index(c) for c in names]
    edges = []
    for line in (root / "cora.cites").read_text().split("\n"):
        if line.strip():
            a, b = line.split()
            if a in index and b in index:
                edges.append((index[a], index[b]))
    return np.array(feats), labels, edges


def load_planetoid(root):
    def read(name):
        with open(root / f"ind.cora.{name}", "rb") as f:
            return pickle.load(f, encoding="latin1")

    tx, allx = read("tx"), read("allx")
    ty, ally = read("ty"), read("ally")
    graph = read("graph")
    test_index = [int(v) for v in (root / "ind.cora.test.index").read_text().split()]
    feats = np.vstack([allx.toarray(), tx.toarray()])
    onehot = np.vstack([ally, ty])
    order = np.sort(test_index)
    feats[test_index] = feats[order]
    onehot[test_index] = onehot[order]
    labels = onehot.argmax(axis=1).tolist()
    edges = [(u, v) for u, nbrs in graph.items() for v in nbrs]
    return feats, labels, edges


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("src", type=Path, help="directory holding the raw files")
    ap.add_argument("out", type=Path)
    ap.add_argument("--seed", type=int, default=2025)
    ap.add_argument("--train", type=float, default=0.2)
    ap.add_argument("--val", type=float, default=0.2)
    args = ap.parse_args()

    if (args.src / "cora.content").exists():
        feats, labels, raw_edges = load_linqs(args.src)
    elif (args.src / "ind.cora.graph").exists():
        feats, labels, raw_edges = load_planetoid(args.src)
    else:
        sys.exit(f"no Cora files found in {args.src}")

    n = len(labels)
    edges = sorted({(min(a, b), max(a, b)) for a, b in raw_edges if a != b})
    perm = np.random.default_rng(args.seed).permutation(n)
    n_train, n_val = round(args.train * n), round(args.val * n)
    split = np.zeros(n, dtype=int)
    split[perm[n_train:n_train + n_val]] = 1
    split[perm[n_train + n_val:]] = 2

    doc = {
        "format_version": 1,
        "n": n,
        "d": int(feats.shape[1]),
        "C": max(labels) + 1,
        "edges": [list(e) for e in edges],
        "x": feats.tolist(),
        "y": labels,
        "train_mask": (split == 0).tolist(),
        "val_mask": (split == 1).tolist(),
        "test_mask": (split == 2).tolist(),
    }
    args.out.write_text(json.dumps(doc, separators=(",", ":")))
    print(f"{n} nodes, {len(edges)} edges, {doc['C']} classes -> {args.out}")


if __name__ == "__main__":
    main()
