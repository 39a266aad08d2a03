"""How the two pairwise relations connect a node to its neighbours.

Run with ``python3 demos/range_boxes.py``.  Draws, on a small feature map,
the nodes a single interior node connects to under each relation, first with
every candidate in the range box and then with the 5 x 5 lattice sample.
"""
import numpy as np

from ctxcrf.graph import RangeBoxSpec, SamplingSpec, build_graph

H = W = 15
anchor = 7 * W + 7


def picture(kind, grid):
    g = build_graph(H, W, [RangeBoxSpec(kind, 0.6)], SamplingSpec(grid))
    e = g.edges[kind]
    # surrounding edges start at the anchor; above_below edges end at it (the upper node comes first)
    partners = e[e[:, 0] == anchor, 1] if kind == "surrounding" else e[e[:, 1] == anchor, 0]
    canvas = np.full((H, W), ".")
    canvas.flat[partners] = "o"
    canvas.flat[anchor] = "X"
    return len(partners), "\n".join("  " + " ".join(row) for row in canvas)


for kind in ("surrounding", "above_below"):
    for grid, label in ((None, "all candidates"), (5, "5 x 5 lattice")):
        count, art = picture(kind, grid)
        print(f"{kind}, {label}: {count} neighbours of X")
        print(art + "\n")
