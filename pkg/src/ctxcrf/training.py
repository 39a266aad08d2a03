"""Piecewise and exact-likelihood training of the CRF potentials."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import sparse

from . import nn
from .data import VOID, Sample, nearest_resize_mask, node_labels
from .featmap import output_size
from .graph import CrfGraph
from .inference import exact_inference
from .model import ModelConfig
from .potentials import ModelParams, PotentialTable, edge_features, energy


class EmptyLossError(ValueError):
    """Every node of the sample is void."""


@dataclass
class TrainConfig:
    weight_decay: float = 0.0005
    group_lr: dict = field(default_factory=lambda: {nn.GROUP_PRETRAINED: 1e-4, nn.GROUP_NEW: 1e-3})
    epochs: int = 1
    batch_size: int = 1
    sub_iteration_edge_budget: int = 2000
    scale_min: float = 0.7
    scale_max: float = 1.2
    flip: bool = True
    seed: int = 0
    lr_schedule: str = "constant"    # or "linear": rates fall linearly to 0 over the run

    def __post_init__(self):
        self.group_lr = {int(k): float(v) for k, v in self.group_lr.items()}
        if self.lr_schedule not in ("constant", "linear"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.sub_iteration_edge_budget < 1 or self.batch_size < 1:
            raise ValueError("budgets must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.scale_min > self.scale_max or self.scale_min <= 0:
            raise ValueError("need 0 < scale_min <= scale_max")
        if any(v <= 0 for v in self.group_lr.values()):
            raise ValueError("learning rates must be positive")

    def to_dict(self):
        d = asdict(self)
        d["group_lr"] = {str(k): v for k, v in sorted(self.group_lr.items())}
        return d


@dataclass
class FactorLoss:
    unary_terms: np.ndarray          # per valid node, summed over unary potentials
    pairwise_terms: dict             # kind -> per valid edge

    @property
    def total(self) -> float:
        return float(self.unary_terms.sum() + sum(t.sum() for t in self.pairwise_terms.values()))


# ---------------------------------------------------------------------------
# shared forward/backward plumbing

def _forward_all(params: ModelParams, image, graph: CrfGraph):
    n = graph.n_nodes
    unary = []
    for prefix, pot in params.potentials():
        if not prefix.startswith("unary"):
            continue
        fm, fc = pot.featmap.forward(image)
        if fm.shape[:2] != (graph.height, graph.width):
            raise ValueError(f"feature map {fm.shape[:2]} does not match graph {graph.height}x{graph.width}")
        z, hc = pot.head.forward(fm.reshape(n, -1))
        unary.append((prefix, pot, fm, fc, z, hc))
    pairwise = {}
    for kind, e in graph.edges.items():
        pot = params.pairwise[kind]
        fm, fc = pot.featmap.forward(image)
        pairwise[kind] = (pot, fm, fc, e)
    return unary, pairwise


def _add_prefixed(dst: nn.GradBuffer, src: nn.GradBuffer, prefix):
    for name, (gw, gb) in src.grads.items():
        dst.add(f"{prefix}.{name}", gw, gb)


def _scatter_edge_grad(g_edge, edges, n, d):
    """Sum each edge's feature gradient halves back onto its two endpoint nodes."""
    m = len(edges)
    ones, cols = np.ones(m), np.arange(m)
    first = sparse.csr_matrix((ones, (edges[:, 0], cols)), shape=(n, m))
    second = sparse.csr_matrix((ones, (edges[:, 1], cols)), shape=(n, m))
    return first @ g_edge[:, :d] + second @ g_edge[:, d:]


def _backprop_unary(pot, prefix, fm, fc, hc, gz, grads):
    gx, g_head = pot.head.backward(hc, gz)
    _add_prefixed(grads, g_head, f"{prefix}.net")
    _add_prefixed(grads, pot.featmap.backward(fc, gx.reshape(fm.shape)), f"{prefix}.fm")


def _backprop_pairwise(pot, kind, fm, fc, edges, gz, grads, head_cache):
    n, d = fm.shape[0] * fm.shape[1], fm.shape[2]
    gx, g_head = pot.head.backward(head_cache, gz)
    _add_prefixed(grads, g_head, f"pairwise.{kind}.net")
    g_flat = _scatter_edge_grad(gx, edges, n, d)
    _add_prefixed(grads, pot.featmap.backward(fc, g_flat.reshape(fm.shape)), f"pairwise.{kind}.fm")


def sample_node_labels(sample: Sample, graph: CrfGraph):
    return node_labels(sample.mask, graph.height, graph.width)


# ---------------------------------------------------------------------------
# piecewise objective

def piecewise_loss_and_grads(sample: Sample, params: ModelParams, graph: CrfGraph, normalize=False):
    """Sum of per-factor ``-log P_U`` and ``-log P_V`` terms and their parameter gradients.

    Factors touching a void node are skipped.  With ``normalize`` each factor
    family's gradient is divided by its factor count (mean instead of sum).
    """
    K = params.num_classes
    y = sample_node_labels(sample, graph)
    valid = y != VOID
    if not valid.any():
        raise EmptyLossError(f"sample {sample.id!r} has no labeled nodes")
    grads = nn.GradBuffer()
    unary, pairwise = _forward_all(params, sample.image, graph)
    n_valid = int(valid.sum())
    u_terms = np.zeros(n_valid)
    for prefix, pot, fm, fc, z, hc in unary:
        loss, g = nn.softmax_cross_entropy(z[valid], y[valid])
        u_terms += loss
        gz = np.zeros_like(z)
        gz[valid] = g / n_valid if normalize else g
        _backprop_unary(pot, prefix, fm, fc, hc, gz, grads)
    p_terms = {}
    for kind, (pot, fm, fc, e) in pairwise.items():
        e = e[valid[e[:, 0]] & valid[e[:, 1]]]
        if not len(e):
            p_terms[kind] = np.zeros(0)
            continue
        flat = fm.reshape(graph.n_nodes, -1)
        z, hc = pot.head.forward(edge_features(flat, e))
        loss, g = nn.softmax_cross_entropy(z, y[e[:, 0]] * K + y[e[:, 1]])
        p_terms[kind] = loss
        _backprop_pairwise(pot, kind, fm, fc, e, g / len(e) if normalize else g, grads, hc)
    grads.count = 1
    return FactorLoss(u_terms, p_terms), grads


def piecewise_loss(sample: Sample, params: ModelParams, graph: CrfGraph) -> FactorLoss:
    """Forward-only version of :func:`piecewise_loss_and_grads`."""
    K = params.num_classes
    y = sample_node_labels(sample, graph)
    valid = y != VOID
    if not valid.any():
        raise EmptyLossError(f"sample {sample.id!r} has no labeled nodes")
    u_terms = np.zeros(int(valid.sum()))
    for pot in params.unaries:
        z = pot.head(pot.featmap(sample.image).reshape(graph.n_nodes, -1))
        u_terms += nn.softmax_cross_entropy(z[valid], y[valid])[0]
    p_terms = {}
    for kind, e in graph.edges.items():
        e = e[valid[e[:, 0]] & valid[e[:, 1]]]
        if not len(e):
            p_terms[kind] = np.zeros(0)
            continue
        pot = params.pairwise[kind]
        z = pot.head(edge_features(pot.featmap(sample.image).reshape(graph.n_nodes, -1), e))
        p_terms[kind] = nn.softmax_cross_entropy(z, y[e[:, 0]] * K + y[e[:, 1]])[0]
    return FactorLoss(u_terms, p_terms)


# ---------------------------------------------------------------------------
# exact likelihood (tiny graphs only)

def score_table(params: ModelParams, image, graph: CrfGraph) -> PotentialTable:
    unary, pairwise = _forward_all(params, image, graph)
    K = params.num_classes
    u = sum(z for *_, z, _ in unary)
    pw = {}
    for kind, (pot, fm, fc, e) in pairwise.items():
        flat = fm.reshape(graph.n_nodes, -1)
        pw[kind] = pot.head(edge_features(flat, e)).reshape(len(e), K, K)
    return PotentialTable(u, pw)


def full_nll_loss(sample: Sample, params: ModelParams, graph: CrfGraph) -> float:
    """Forward-only ``E(y) + log Z``."""
    y = sample_node_labels(sample, graph)
    if np.any(y == VOID):
        raise ValueError("exact likelihood training needs a fully labeled sample")
    table = score_table(params, sample.image, graph)
    return energy(y, table, graph) + exact_inference(table, graph).log_partition


def full_nll_loss_and_grads(sample: Sample, params: ModelParams, graph: CrfGraph):
    """``E(y) + log Z`` and its gradient, using exact marginals for the ``log Z`` part."""
    K = params.num_classes
    y = sample_node_labels(sample, graph)
    if np.any(y == VOID):
        raise ValueError("exact likelihood training needs a fully labeled sample")
    unary, pairwise = _forward_all(params, sample.image, graph)
    u = sum(z for *_, z, _ in unary)
    pw, head_caches = {}, {}
    for kind, (pot, fm, fc, e) in pairwise.items():
        z, hc = pot.head.forward(edge_features(fm.reshape(graph.n_nodes, -1), e))
        pw[kind] = z.reshape(len(e), K, K)
        head_caches[kind] = hc
    table = PotentialTable(u, pw)
    exact = exact_inference(table, graph)
    loss = energy(y, table, graph) + exact.log_partition
    grads = nn.GradBuffer()
    # d(E + log Z)/dz = marginal - indicator(observed)
    gu = exact.marginals.copy()
    gu[np.arange(len(y)), y] -= 1.0
    for prefix, pot, fm, fc, z, hc in unary:
        _backprop_unary(pot, prefix, fm, fc, hc, gu, grads)
    for kind, (pot, fm, fc, e) in pairwise.items():
        if not len(e):
            continue
        gp = exact.pairwise_marginals[kind].copy()
        gp[np.arange(len(e)), y[e[:, 0]], y[e[:, 1]]] -= 1.0
        _backprop_pairwise(pot, kind, fm, fc, e, gp.reshape(len(e), K * K), grads, head_caches[kind])
    grads.count = 1
    return float(loss), grads


# ---------------------------------------------------------------------------
# asynchronous training step

def _head_params(params: ModelParams, kind):
    return {f"pairwise.{kind}.net.{n}": lp for n, lp in params.pairwise[kind].head.layers.items()}


def train_step_async(batch, params: ModelParams, model_cfg: ModelConfig, train_cfg: TrainConfig, rng,
                     lr_scale=1.0):
    """One outer iteration; updates ``params`` in place and returns per-iteration stats.

    Pairwise heads are updated after every sub-iteration of at most
    ``sub_iteration_edge_budget`` edges; gradients for the feature extractors
    and the unary heads are collected over the whole iteration and applied once.
    """
    if not batch:
        raise ValueError("empty batch")
    K = params.num_classes
    layers = params.named_layers()
    group_lr = {g: lr * lr_scale for g, lr in train_cfg.group_lr.items()}
    deferred = nn.GradBuffer()
    B = len(batch)
    u_losses, p_losses = [], {kind: [] for kind in params.pairwise}
    fwd = []
    for sample in batch:
        graph = model_cfg.graph_for_image(*sample.image.shape[:2])
        y = sample_node_labels(sample, graph)
        valid = y != VOID
        unary, pairwise = _forward_all(params, sample.image, graph)
        if valid.any():
            n_valid = int(valid.sum())
            for prefix, pot, fm, fc, z, hc in unary:
                loss, g = nn.softmax_cross_entropy(z[valid], y[valid])
                u_losses.append(loss.mean())
                gz = np.zeros_like(z)
                gz[valid] = g / (n_valid * B)
                _backprop_unary(pot, prefix, fm, fc, hc, gz, deferred)
        fwd.append((graph, y, valid, pairwise))

    for kind in params.pairwise:
        pot = params.pairwise[kind]
        # (sample index, p, q) for every labeled edge in the batch
        items = []
        for b, (graph, y, valid, pairwise) in enumerate(fwd):
            e = pairwise[kind][3]
            e = e[valid[e[:, 0]] & valid[e[:, 1]]]
            items.append(np.column_stack([np.full(len(e), b), e]))
        items = np.concatenate(items) if items else np.zeros((0, 3), int)
        if not len(items):
            continue
        items = items[rng.permutation(len(items))]
        g_flats = [np.zeros((g.n_nodes, pw[kind][1].shape[2])) for g, _, _, pw in fwd]
        budget = train_cfg.sub_iteration_edge_budget
        head = _head_params(params, kind)
        for start in range(0, len(items), budget):
            chunk = items[start:start + budget]
            feats, targets = [], []
            for b in np.unique(chunk[:, 0]):
                graph, y, _, pairwise = fwd[b]
                e = chunk[chunk[:, 0] == b, 1:]
                flat = pairwise[kind][1].reshape(graph.n_nodes, -1)
                feats.append((b, e, edge_features(flat, e)))
                targets.append(y[e[:, 0]] * K + y[e[:, 1]])
            x = np.concatenate([f for _, _, f in feats])
            z, hc = pot.head.forward(x)
            loss, g = nn.softmax_cross_entropy(z, np.concatenate(targets))
            p_losses[kind].append(loss)
            gx, g_head = pot.head.backward(hc, g / len(chunk))
            # feature-map gradient is the mean over all edges of the iteration
            gx = gx * (len(chunk) / len(items))
            off = 0
            for b, e, f in feats:
                d = f.shape[1] // 2
                g_flats[b] += _scatter_edge_grad(gx[off:off + len(e)], e, len(g_flats[b]), d)
                off += len(e)
            named = nn.GradBuffer()
            _add_prefixed(named, g_head, f"pairwise.{kind}.net")
            nn.sgd_step(head, named, group_lr, train_cfg.weight_decay)
        for b, (graph, _, _, pairwise) in enumerate(fwd):
            _, fm, fc, _ = pairwise[kind]
            _add_prefixed(deferred, pot.featmap.backward(fc, g_flats[b].reshape(fm.shape)),
                          f"pairwise.{kind}.fm")

    nn.sgd_step(layers, deferred, group_lr, train_cfg.weight_decay)
    return {
        "unary_loss": float(np.mean(u_losses)) if u_losses else float("nan"),
        "pairwise_loss": {k: float(np.concatenate(v).mean()) if v else float("nan")
                          for k, v in p_losses.items()},
    }


def train_step_sync(sample: Sample, params: ModelParams, model_cfg: ModelConfig, train_cfg: TrainConfig):
    """Reference step: every gradient from the same parameters, one update."""
    graph = model_cfg.graph_for_image(*sample.image.shape[:2])
    loss, grads = piecewise_loss_and_grads(sample, params, graph, normalize=True)
    nn.sgd_step(params.named_layers(), grads, train_cfg.group_lr, train_cfg.weight_decay)
    return loss


# ---------------------------------------------------------------------------
# augmentation and the training loop

def augment(sample: Sample, config: TrainConfig, rng) -> Sample:
    """Random rescale (bilinear image, nearest-neighbor mask) and horizontal flip."""
    s = rng.uniform(config.scale_min, config.scale_max)
    h, w = sample.mask.shape
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    image = nn.bilinear_resize(sample.image, nh, nw)
    mask = nearest_resize_mask(sample.mask, nh, nw)
    if config.flip and rng.random() < 0.5:
        image, mask = image[:, ::-1].copy(), mask[:, ::-1].copy()
    return Sample(image, mask, sample.id)


def flip_sample(sample: Sample) -> Sample:
    return Sample(sample.image[:, ::-1].copy(), sample.mask[:, ::-1].copy(), sample.id)


LOG_HEADER = "iteration\tunary_loss\t{pairwise}\tparam_norm\twall_time"


def train(samples, model_cfg: ModelConfig, train_cfg: TrainConfig, params: ModelParams | None = None,
          log=None, timestamps=True):
    """Piecewise training over ``samples``; ``log`` receives one TSV line per outer iteration."""
    params = model_cfg.init_params() if params is None else params
    rng = np.random.default_rng(train_cfg.seed)
    kinds = list(params.pairwise)
    min_side = model_cfg.featmap.downsample_factor / min(model_cfg.featmap.scales)
    if log is not None:
        log(LOG_HEADER.format(pairwise="\t".join(f"pairwise_loss[{k}]" for k in kinds) or "-"))
    t0 = time.perf_counter()
    it = 0
    total = train_cfg.epochs * -(-len(samples) // train_cfg.batch_size)
    for _ in range(train_cfg.epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), train_cfg.batch_size):
            batch = []
            for i in order[start:start + train_cfg.batch_size]:
                s = augment(samples[i], train_cfg, rng)
                if min(s.mask.shape) < min_side:
                    s = samples[i]
                batch.append(s)
            scale = 1.0 - it / total if train_cfg.lr_schedule == "linear" else 1.0
            stats = train_step_async(batch, params, model_cfg, train_cfg, rng, lr_scale=scale)
            it += 1
            if log is not None:
                pw = "\t".join(f"{stats['pairwise_loss'][k]:.6f}" for k in kinds) or "-"
                wall = f"{time.perf_counter() - t0:.3f}" if timestamps else "-"
                log(f"{it}\t{stats['unary_loss']:.6f}\t{pw}\t{params.norm():.6f}\t{wall}")
    return params
