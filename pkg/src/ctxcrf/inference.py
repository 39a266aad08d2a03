"""Exact enumeration and mean-field inference for ``P(y) ∝ exp(-E(y))``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .graph import CrfGraph
from .nn import softmax
from .potentials import PotentialTable

MAX_STATES = 2 ** 20


class StateSpaceTooLarge(ValueError):
    pass


@dataclass
class ExactResult:
    log_partition: float
    marginals: np.ndarray          # (n, K)
    map_labeling: np.ndarray       # (n,)
    pairwise_marginals: dict       # kind -> (m, K, K)


def enumerate_labelings(n, K):
    """All K**n labelings as rows, first node most significant."""
    if n == 0:
        return np.zeros((1, 0), dtype=np.int64)
    idx = np.arange(K ** n)
    powers = K ** np.arange(n - 1, -1, -1)
    return (idx[:, None] // powers[None, :]) % K


def all_energies(table: PotentialTable, graph: CrfGraph, labelings):
    n = labelings.shape[1]
    e = -table.unary[np.arange(n)[None, :], labelings].sum(axis=1)
    for kind, pe in graph.edges.items():
        z = table.pairwise[kind]
        for j, (p, q) in enumerate(pe):
            e -= z[j][labelings[:, p], labelings[:, q]]
    return e


def exact_inference(table: PotentialTable, graph: CrfGraph) -> ExactResult:
    n, K = table.unary.shape
    if float(K) ** n > MAX_STATES:
        raise StateSpaceTooLarge(f"{K}**{n} labelings exceeds the enumeration limit of {MAX_STATES}")
    ys = enumerate_labelings(n, K)
    energies = all_energies(table, graph, ys)
    log_z = float(logsumexp(-energies))
    prob = np.exp(-energies - log_z)
    marg = np.zeros((n, K))
    for p in range(n):
        marg[p] = np.bincount(ys[:, p], weights=prob, minlength=K)
    pair = {}
    for kind, pe in graph.edges.items():
        m = np.zeros((len(pe), K, K))
        for j, (p, q) in enumerate(pe):
            m[j] = np.bincount(ys[:, p] * K + ys[:, q], weights=prob, minlength=K * K).reshape(K, K)
        pair[kind] = m
    return ExactResult(log_z, marg, ys[int(np.argmin(energies))].copy(), pair)


# ---------------------------------------------------------------------------
# mean field

def _incidence(graph: CrfGraph, n):
    """Per node: list of (kind, edge indices where node is first, second endpoint)."""
    out_e = [[] for _ in range(n)]
    for kind, pe in graph.edges.items():
        if not len(pe):
            continue
        for pos in (0, 1):
            order = np.argsort(pe[:, pos], kind="stable")
            bounds = np.searchsorted(pe[order, pos], np.arange(n + 1))
            for p in range(n):
                sel = order[bounds[p]:bounds[p + 1]]
                if len(sel):
                    out_e[p].append((kind, pos, sel, pe[sel, 1 - pos]))
    return out_e


def node_field(q, table: PotentialTable, incidence, p):
    """Log-potential of node ``p``'s coordinate update given the other marginals."""
    f = table.unary[p].copy()
    for kind, pos, sel, other in incidence[p]:
        z = table.pairwise[kind][sel]
        if pos == 0:   # p is the first endpoint: sum_b z[a, b] Q_q(b)
            f += np.einsum("jab,jb->a", z, q[other])
        else:          # p is the second endpoint: sum_a z[a, b] Q_q(a)
            f += np.einsum("jab,ja->b", z, q[other])
    return f


def mean_field(table: PotentialTable, graph: CrfGraph, iterations: int = 3, damping: float = 0.0,
               init=None, callback=None):
    """Sequential mean-field sweeps in node order starting from uniform marginals.

    ``callback(sweep, q)`` is called after every full sweep.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not 0 <= damping < 1:
        raise ValueError("damping must lie in [0, 1)")
    n, K = table.unary.shape
    q = np.full((n, K), 1.0 / K) if init is None else np.array(init, dtype=np.float64)
    inc = _incidence(graph, n)
    for it in range(iterations):
        for p in range(n):
            new = softmax(node_field(q, table, inc, p))
            q[p] = new if damping == 0 else (1 - damping) * new + damping * q[p]
        if callback is not None:
            callback(it, q.copy())
    return q


def free_energy(q, table: PotentialTable, graph: CrfGraph) -> float:
    """``E_Q[E] - H(Q)``; an upper bound on ``-log Z``."""
    q = np.asarray(q)
    expected = -(q * table.unary).sum()
    for kind, pe in graph.edges.items():
        if len(pe):
            expected -= np.einsum("ja,jab,jb->", q[pe[:, 0]], table.pairwise[kind], q[pe[:, 1]])
    with np.errstate(divide="ignore", invalid="ignore"):
        neg_entropy = np.where(q > 0, q * np.log(q), 0.0).sum()
    return float(expected + neg_entropy)


def map_from_marginals(q):
    """Per-node argmax; ties go to the lowest class index."""
    return np.asarray(q).argmax(axis=-1)


def coarse_score_map(q, graph: CrfGraph, height: int, width: int):
    q = np.asarray(q)
    if q.shape[0] != height * width or graph.n_nodes != height * width:
        raise ValueError(f"{q.shape[0]} marginals cannot fill a {height}x{width} grid")
    return q.reshape(height, width, q.shape[1])
