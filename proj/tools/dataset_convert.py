#!/usr/bin/env python3
"""Convert graph classification datasets from the single-file adjacency-list
format (as shipped with several public graph benchmark collections) into the
multi-file TU text format this project consumes.

Input format:
    line 1: number of graphs G
    per graph: "n label", then n node lines "tag degree nbr0 nbr1 ..."
    with 0-based node ids local to the graph.

Output files (1-based global node ids, edges written in both directions):
    <name>_A.txt, <name>_graph_indicator.txt, <name>_graph_labels.txt,
    <name>_node_labels.txt (omitted when every node carries the same tag)
"""

import argparse
import os
import sys


def convert(src_path: str, out_dir: str, name: str) -> None:
    with open(src_path) as f:
        tokens = f.read().split("\n")
    line = iter(tokens)

    n_graphs = int(next(line))
    indicator = []
    graph_labels = []
    node_tags = []
    edges = []  # (u, v) 1-based global, as given (both directions)
    offset = 0

    for g in range(n_graphs):
        n, label = map(int, next(line).split())
        graph_labels.append(label)
        for i in range(n):
            parts = next(line).split()
            node_tags.append(int(parts[0]))
            indicator.append(g + 1)
            deg = int(parts[1])
            for v in parts[2 : 2 + deg]:
                edges.append((offset + i + 1, offset + int(v) + 1))
        offset += n

    os.makedirs(out_dir, exist_ok=True)
    pre = os.path.join(out_dir, name)
    with open(pre + "_A.txt", "w") as f:
        for u, v in edges:
            f.write(f"{u}, {v}\n")
    with open(pre + "_graph_indicator.txt", "w") as f:
        f.write("\n".join(str(g) for g in indicator) + "\n")
    with open(pre + "_graph_labels.txt", "w") as f:
        f.write("\n".join(str(l) for l in graph_labels) + "\n")
    if len(set(node_tags)) > 1:
        with open(pre + "_node_labels.txt", "w") as f:
            f.write("\n".join(str(t) for t in node_tags) + "\n")

    print(f"{name}: {n_graphs} graphs, {offset} nodes, "
          f"{len(edges)} directed edge entries -> {out_dir}")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("src", help="input .txt file (adjacency-list format)")
    ap.add_argument("out_dir", help="output directory for the TU files")
    ap.add_argument("name", help="dataset name used as the file prefix")
    args = ap.parse_args()
    convert(args.src, args.out_dir, args.name)
    return 0


if __name__ == "__main__":
    sys.exit(main())
