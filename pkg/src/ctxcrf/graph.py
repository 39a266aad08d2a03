"""CRF graph over feature-map positions with range-box pairwise connections.

Node ``r * width + c`` sits at feature-map cell (r, c).  A range box of side
``s = floor(box_fraction * min(height, width))`` covers ``s`` rows and ``s``
columns of cells.  Column offsets always run ``-(s // 2) .. s - 1 - s // 2``
around the node.  For the ``surrounding`` relation the rows do the same; for
``above_below`` the node sits on the bottom row of the box (row offsets
``-(s - 1) .. 0``) and only cells strictly above it are connected, each edge
stored as ``(upper, lower)``.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

SURROUNDING = "surrounding"
ABOVE_BELOW = "above_below"
RELATION_KINDS = (SURROUNDING, ABOVE_BELOW)


@dataclass(frozen=True)
class RangeBoxSpec:
    kind: str
    box_fraction: float = 0.4

    def __post_init__(self):
        if self.kind not in RELATION_KINDS:
            raise ValueError(f"unknown relation kind {self.kind!r}")
        if not 0 < self.box_fraction <= 1:
            raise ValueError("box_fraction must lie in (0, 1]")

    @property
    def anchor(self) -> str:
        return "center" if self.kind == SURROUNDING else "bottom_center"


@dataclass(frozen=True)
class SamplingSpec:
    """``grid=None`` keeps every candidate in the box; otherwise a grid x grid lattice."""
    grid: int | None = 5

    def __post_init__(self):
        if self.grid is not None and (self.grid < 1 or self.grid % 2 == 0):
            raise ValueError("sampling grid must be odd")


@dataclass
class CrfGraph:
    height: int
    width: int
    num_classes: int
    edges: dict   # kind -> (m, 2) int array of (p, q) node indices

    @property
    def n_nodes(self) -> int:
        return self.height * self.width

    @property
    def nodes(self):
        r, c = np.divmod(np.arange(self.n_nodes), self.width)
        return np.stack([r, c], axis=1)

    @property
    def n_edges(self) -> int:
        return sum(len(e) for e in self.edges.values())

    def edge_list(self):
        """Flat list of ``(p, q, kind)`` triples in storage order."""
        return [(int(p), int(q), k) for k, e in self.edges.items() for p, q in e]

    def degrees(self, kind):
        """Edges per anchor node (the node whose box produced the edge)."""
        e = self.edges[kind]
        col = 0 if kind == SURROUNDING else 1
        return np.bincount(e[:, col], minlength=self.n_nodes) if len(e) else np.zeros(self.n_nodes, int)


def box_side(height, width, fraction):
    return int(np.floor(fraction * min(height, width) + 1e-9))


def box_offsets(side, kind):
    """Inclusive (row_lo, row_hi, col_lo, col_hi) offsets of the box around its anchor."""
    lo = -(side // 2)
    hi = side - 1 + lo
    if kind == SURROUNDING:
        return lo, hi, lo, hi
    return -(side - 1), 0, lo, hi


def _round_half_toward_zero(x):
    return np.sign(x) * np.ceil(np.abs(x) - 0.5)


def lattice_offsets(lo, hi, grid):
    pts = np.linspace(lo, hi, grid) if grid > 1 else np.array([(lo + hi) / 2])
    return _round_half_toward_zero(pts).astype(int)


def candidate_offsets(side, kind):
    """All (dr, dc) offsets a node connects to before sampling."""
    if side < 1:
        return np.zeros((0, 2), int)
    r0, r1, c0, c1 = box_offsets(side, kind)
    dr, dc = np.meshgrid(np.arange(r0, r1 + 1), np.arange(c0, c1 + 1), indexing="ij")
    off = np.stack([dr.ravel(), dc.ravel()], axis=1)
    return _keep_valid(off, kind)


def sampled_offsets(side, kind, grid=5):
    """Lattice offsets: ``grid`` x ``grid`` points spanning the box, rounded, deduplicated."""
    if side < 1:
        return np.zeros((0, 2), int)
    r0, r1, c0, c1 = box_offsets(side, kind)
    rows, cols = lattice_offsets(r0, r1, grid), lattice_offsets(c0, c1, grid)
    off = np.array([(r, c) for r in rows for c in cols], dtype=int).reshape(-1, 2)
    _, first = np.unique(off, axis=0, return_index=True)
    return _keep_valid(off[np.sort(first)], kind)


def _keep_valid(off, kind):
    keep = np.any(off != 0, axis=1)
    if kind == ABOVE_BELOW:
        keep &= off[:, 0] < 0
    return off[keep]


def sample_connections(height, width, offsets, kind):
    """Edges from anchoring ``offsets`` at every node, dropping out-of-map targets."""
    rr, cc = np.divmod(np.arange(height * width), width)
    tr = rr[:, None] + offsets[None, :, 0]
    tc = cc[:, None] + offsets[None, :, 1]
    inside = (tr >= 0) & (tr < height) & (tc >= 0) & (tc < width)
    anchor = np.broadcast_to(np.arange(height * width)[:, None], tr.shape)[inside]
    target = (tr * width + tc)[inside]
    if kind == SURROUNDING:
        return np.stack([anchor, target], axis=1)
    return np.stack([target, anchor], axis=1)


def build_graph(height: int, width: int, specs, sampling: SamplingSpec | None = None,
                num_classes: int = 2) -> CrfGraph:
    if height < 1 or width < 1:
        raise ValueError("feature map must be at least 1x1")
    sampling = SamplingSpec() if sampling is None else sampling
    edges = {}
    for spec in specs:
        side = box_side(height, width, spec.box_fraction)
        if sampling.grid is None:
            off = candidate_offsets(side, spec.kind)
        else:
            off = sampled_offsets(side, spec.kind, sampling.grid)
        e = sample_connections(height, width, off, spec.kind).astype(np.int64)
        if spec.kind in edges:
            e = np.concatenate([edges[spec.kind], e])
            _, first = np.unique(e, axis=0, return_index=True)
            e = e[np.sort(first)]
        edges[spec.kind] = e.reshape(-1, 2)
    return CrfGraph(height, width, num_classes, edges)


def describe(graph: CrfGraph) -> str:
    """Text summary: node count, edges per kind, anchor-degree histogram."""
    lines = [f"nodes\t{graph.n_nodes}", f"height\t{graph.height}", f"width\t{graph.width}"]
    for kind, e in graph.edges.items():
        lines.append(f"edges[{kind}]\t{len(e)}")
    for kind in graph.edges:
        hist = Counter(graph.degrees(kind).tolist())
        for deg in sorted(hist):
            lines.append(f"degree[{kind}]={deg}\t{hist[deg]}")
    return "\n".join(lines) + "\n"
