import itertools
import math

import numpy as np
import pytest

from ctxcrf.graph import CrfGraph
from ctxcrf.potentials import PotentialTable


def random_graph(rng, n_max=10, k_max=3, edge_prob=0.4, k_min=2):
    """Random small CRF: up to two relation kinds, arbitrary ordered edges, scores in [-2, 2]."""
    K = int(rng.integers(k_min, k_max + 1))
    n_cap = int(math.floor(20 / math.log2(K)))
    n = int(rng.integers(1, min(n_max, n_cap) + 1))
    edges = {}
    for kind in ("surrounding", "above_below"):
        pairs = [(p, q) for p in range(n) for q in range(n) if p != q and rng.random() < edge_prob / 2]
        edges[kind] = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    graph = CrfGraph(1, n, K, edges)
    table = PotentialTable(rng.uniform(-2, 2, (n, K)),
                           {k: rng.uniform(-2, 2, (len(e), K, K)) for k, e in edges.items()})
    return graph, table


def brute_force(table, graph):
    """Plain-Python enumerator: (log Z, node marginals, pairwise marginals, MAP)."""
    n, K = table.unary.shape
    triples = [(int(p), int(q), kind, j) for kind, e in graph.edges.items() for j, (p, q) in enumerate(e)]
    logw, labelings = [], []
    for y in itertools.product(range(K), repeat=n):
        s = math.fsum([float(table.unary[p, y[p]]) for p in range(n)] +
                      [float(table.pairwise[kind][j, y[p], y[q]]) for p, q, kind, j in triples])
        logw.append(s)
        labelings.append(y)
    m = max(logw)
    log_z = m + math.log(math.fsum(math.exp(v - m) for v in logw))
    marg = [[0.0] * K for _ in range(n)]
    pair = {kind: np.zeros((len(e), K, K)) for kind, e in graph.edges.items()}
    for y, v in zip(labelings, logw):
        pr = math.exp(v - log_z)
        for p in range(n):
            marg[p][y[p]] += pr
        for p, q, kind, j in triples:
            pair[kind][j, y[p], y[q]] += pr
    best = max(range(len(logw)), key=lambda i: (logw[i], -i))
    return log_z, np.array(marg), pair, np.array(labelings[best])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_featmap():
    from ctxcrf.featmap import FeatMapConfig
    return FeatMapConfig(scales=(1.0, 0.5), trunk_blocks=((1, 3), (1, 4)), head_layers=1, base_channels=3,
                         pyramid_windows=(3,), downsample_factor=2)


def tiny_model(num_classes=3, relations=("surrounding", "above_below"), box=0.5, grid=5, num_unary=1, seed=0):
    from ctxcrf.graph import RangeBoxSpec
    from ctxcrf.model import ModelConfig
    return ModelConfig(num_classes=num_classes, featmap=tiny_featmap(),
                       relations=tuple(RangeBoxSpec(k, box) for k in relations), sampling_grid=grid,
                       num_unary=num_unary, unary_hidden=6, pairwise_hidden=7, seed=seed)


def random_sample(rng, h, w, K, void_frac=0.0):
    from ctxcrf.data import VOID, Sample
    mask = rng.integers(0, K, (h, w))
    mask[rng.random((h, w)) < void_frac] = VOID
    return Sample(rng.random((h, w, 3)), mask, "r")


def flat_grads(grads):
    """GradBuffer keyed by layer -> dict keyed like ModelParams.blocks()."""
    out = {}
    for name, (gw, gb) in grads.grads.items():
        out[name + ".w"], out[name + ".b"] = gw, gb
    return out
