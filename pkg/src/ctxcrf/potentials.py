"""Unary and pairwise potential networks over feature-map features.

Scores ``z`` are network outputs; potentials are their negations, so the
energy of a labeling is ``-sum_p z[p, y_p] - sum_(p,q) z[p, q, y_p, y_q]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .featmap import FeatMapConfig, FeatMapNet
from .graph import CrfGraph


def node_feature(fm, p):
    """Feature vector of node ``p``, given as ``(row, col)`` or a flat index."""
    fm = np.asarray(fm)
    h, w = fm.shape[:2]
    r, c = divmod(int(p), w) if np.ndim(p) == 0 else (int(p[0]), int(p[1]))
    if not (0 <= r < h and 0 <= c < w):
        raise IndexError(f"position {(r, c)} outside {h}x{w} feature map")
    return fm[r, c].copy()


def edge_feature(fm, p, q):
    a, b = node_feature(fm, p), node_feature(fm, q)
    if np.array_equal(np.atleast_1d(p), np.atleast_1d(q)):
        raise ValueError("edge endpoints must differ")
    return np.concatenate([a, b])


def edge_features(flat_fm, edges):
    """Batched ``[feat(p) || feat(q)]`` for an (m, 2) edge array; ``flat_fm`` is (n, d)."""
    return np.concatenate([flat_fm[edges[:, 0]], flat_fm[edges[:, 1]]], axis=1)


class MLP:
    """dense -> relu -> dense head shared over all nodes (or edges)."""

    def __init__(self, layers: dict):
        self.layers = layers

    @classmethod
    def init(cls, n_in, hidden, n_out, rng):
        return cls({"fc0": nn.init_dense(n_in, hidden, rng, relu=True), "fc1": nn.init_dense(hidden, n_out, rng)})

    @property
    def n_in(self):
        return self.layers["fc0"].weights.shape[1]

    def forward(self, x):
        h = nn.dense_forward(x, self.layers["fc0"])
        a = nn.relu_forward(h)
        return nn.dense_forward(a, self.layers["fc1"]), (x, h, a)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, upstream, need_input_grad=True):
        x, h, a = cache
        grads = nn.GradBuffer()
        ga, gw, gb = nn.dense_backward(a, self.layers["fc1"], upstream)
        grads.add("fc1", gw, gb)
        gh = nn.relu_backward(h, ga)
        gx, gw, gb = nn.dense_backward(x, self.layers["fc0"], gh)
        grads.add("fc0", gw, gb)
        grads.count = 1
        return (gx if need_input_grad else None), grads


def unary_scores(feat, unary: MLP):
    """Length-K scores for one feature vector (or (n, K) for a batch)."""
    return unary(feat)


def pairwise_scores(ef, pairwise: MLP, num_classes: int):
    """K x K score matrix: entry (a, b) scores first endpoint = a, second = b."""
    out = pairwise(ef)
    return out.reshape(out.shape[:-1] + (num_classes, num_classes))


@dataclass
class PotentialTable:
    unary: np.ndarray                              # (n, K)
    pairwise: dict = field(default_factory=dict)   # kind -> (m, K, K)

    @property
    def num_classes(self):
        return self.unary.shape[1]

    def shifted(self, c):
        return PotentialTable(self.unary + c, {k: v + c for k, v in self.pairwise.items()})


def energy(y, table: PotentialTable, graph: CrfGraph) -> float:
    y = np.asarray(y, dtype=int)
    if y.shape != (table.unary.shape[0],):
        raise ValueError(f"labeling has {y.size} entries, graph has {table.unary.shape[0]} nodes")
    if y.size and (y.min() < 0 or y.max() >= table.num_classes):
        raise ValueError("label out of range")
    e = -table.unary[np.arange(y.size), y].sum()
    for kind, pe in graph.edges.items():
        if len(pe):
            e -= table.pairwise[kind][np.arange(len(pe)), y[pe[:, 0]], y[pe[:, 1]]].sum()
    return float(e)


# ---------------------------------------------------------------------------
# model parameters

@dataclass
class Potential:
    """One potential type: its own feature extractor plus a shallow head."""
    featmap: FeatMapNet
    head: MLP


@dataclass
class ModelParams:
    num_classes: int
    featmap_config: FeatMapConfig
    unaries: list                                  # list[Potential]
    pairwise: dict = field(default_factory=dict)   # kind -> Potential

    @classmethod
    def init(cls, num_classes, featmap_config, relations=(), num_unary=1,
             unary_hidden=64, pairwise_hidden=64, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        d = featmap_config.feature_dim
        unaries = [Potential(FeatMapNet.init(featmap_config, rng), MLP.init(d, unary_hidden, num_classes, rng))
                   for _ in range(num_unary)]
        pairwise = {kind: Potential(FeatMapNet.init(featmap_config, rng),
                                    MLP.init(2 * d, pairwise_hidden, num_classes ** 2, rng))
                    for kind in relations}
        return cls(num_classes, featmap_config, unaries, pairwise)

    def potentials(self):
        """``(prefix, Potential)`` pairs in a fixed order."""
        for i, pot in enumerate(self.unaries):
            yield f"unary{i}", pot
        for kind, pot in self.pairwise.items():
            yield f"pairwise.{kind}", pot

    def named_layers(self) -> dict:
        """Flat ``name -> LayerParams`` view (shared objects, not copies)."""
        out = {}
        for prefix, pot in self.potentials():
            for name, lp in pot.featmap.layers.items():
                out[f"{prefix}.fm.{name}"] = lp
            for name, lp in pot.head.layers.items():
                out[f"{prefix}.net.{name}"] = lp
        return out

    def blocks(self) -> dict:
        out = {}
        for name, lp in self.named_layers().items():
            out[name + ".w"] = lp.weights
            out[name + ".b"] = lp.bias
        return out

    def layer_groups(self) -> dict:
        return {name: lp.group for name, lp in self.named_layers().items()}

    def norm(self) -> float:
        return float(np.sqrt(sum((lp.weights ** 2).sum() + (lp.bias ** 2).sum()
                                 for lp in self.named_layers().values())))

    def copy(self):
        import copy
        return copy.deepcopy(self)


def compute_table(params: ModelParams, image, graph: CrfGraph, unary_weight=1.0, pairwise_weight=1.0):
    """Run every potential on ``image`` and assemble the score table for ``graph``."""
    K = params.num_classes
    unary = np.zeros((graph.n_nodes, K))
    for pot in params.unaries:
        fm = pot.featmap(image)
        if fm.shape[:2] != (graph.height, graph.width):
            raise ValueError(f"feature map {fm.shape[:2]} does not match graph {graph.height}x{graph.width}")
        unary += unary_weight * pot.head(fm.reshape(graph.n_nodes, -1))
    pairwise = {}
    for kind, e in graph.edges.items():
        pot = params.pairwise.get(kind)
        if pot is None:
            pairwise[kind] = np.zeros((len(e), K, K))
            continue
        flat = pot.featmap(image).reshape(graph.n_nodes, -1)
        pairwise[kind] = pairwise_weight * pairwise_scores(edge_features(flat, e), pot.head, K)
    return PotentialTable(unary, pairwise)
