"""Finite-difference gradient suite over every layer and both training objectives."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import Sample
from .featmap import FeatMapConfig, FeatMapNet
from .graph import RangeBoxSpec
from .model import ModelConfig
from .training import full_nll_loss, full_nll_loss_and_grads, piecewise_loss, piecewise_loss_and_grads

SUITE_FEATMAP = FeatMapConfig(scales=(1.0, 0.5), trunk_blocks=((1, 3), (1, 4)), head_layers=1, base_channels=3,
                              pyramid_windows=(3,), downsample_factor=2)


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_error: float
    passed: bool


def _layer_checks(rng):
    """``name -> (loss_fn, arrays)`` for each layer with a random linear read-out."""
    checks = {}

    x = rng.normal(size=(5, 4))
    lp = nn.init_dense(4, 3, rng)
    lp.bias[...] = rng.normal(size=3)
    u = rng.normal(size=(5, 3))

    def dense():
        gx, gw, gb = nn.dense_backward(x, lp, u)
        return float((nn.dense_forward(x, lp) * u).sum()), {"x": gx, "w": gw, "b": gb}
    checks["dense"] = (dense, {"x": x, "w": lp.weights, "b": lp.bias})

    xc = rng.normal(size=(5, 6, 2))
    cp = nn.init_conv3x3(2, 3, rng)
    cp.bias[...] = rng.normal(size=3)
    uc = rng.normal(size=(5, 6, 3))

    def conv():
        gx, gw, gb = nn.conv3x3_backward(xc, cp, uc)
        return float((nn.conv3x3_forward(xc, cp) * uc).sum()), {"x": gx, "w": gw, "b": gb}
    checks["conv3x3"] = (conv, {"x": xc, "w": cp.weights, "b": cp.bias})

    # keep inputs away from the kink so central differences stay on one side
    xr = rng.uniform(0.1, 1.0, size=(4, 5)) * rng.choice([-1.0, 1.0], size=(4, 5))
    ur = rng.normal(size=(4, 5))
    checks["relu"] = (lambda: (float((nn.relu_forward(xr) * ur).sum()), {"x": nn.relu_backward(xr, ur)}),
                      {"x": xr})

    for window, stride in ((2, 2), (3, 1)):
        xp = rng.permutation(35).reshape(5, 7, 1) * 0.1 + rng.normal(size=(5, 7, 1)) * 1e-3
        out, _ = nn.maxpool_forward(xp, window, stride)
        up = rng.normal(size=out.shape)

        def pool(xp=xp, up=up, window=window, stride=stride):
            o, cache = nn.maxpool_forward(xp, window, stride)
            return float((o * up).sum()), {"x": nn.maxpool_backward(cache, up)}
        checks[f"maxpool{window}s{stride}"] = (pool, {"x": xp})

    xs = rng.normal(size=(3, 4))
    us = rng.normal(size=(3, 4))

    def smax():
        out = nn.softmax(xs)
        return float((out * us).sum()), {"x": nn.softmax_backward(out, us)}
    checks["softmax"] = (smax, {"x": xs})

    xb = rng.normal(size=(3, 4, 2))
    ub = rng.normal(size=(7, 5, 2))
    checks["bilinear-resize"] = (
        lambda: (float((nn.bilinear_resize(xb, 7, 5) * ub).sum()), {"x": nn.bilinear_resize_backward(ub, 3, 4)}),
        {"x": xb})

    xa, xb2 = rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 3, 3))
    ua = rng.normal(size=(2, 3, 5))

    def concat():
        ga, gb = nn.concat_backward(ua, [2, 3])
        return float((nn.concat_forward([xa, xb2]) * ua).sum()), {"a": ga, "b": gb}
    checks["concat"] = (concat, {"a": xa, "b": xb2})
    return checks


def _flat(grads: nn.GradBuffer):
    out = {}
    for name, (gw, gb) in grads.grads.items():
        out[name + ".w"], out[name + ".b"] = gw, gb
    return out


def _model_checks(rng):
    checks = {}
    net = FeatMapNet.init(SUITE_FEATMAP, rng)
    img = rng.random((8, 6, 3))
    u = rng.normal(size=net(img).shape)
    arrays = {}
    for name, lp in net.layers.items():
        arrays[name + ".w"], arrays[name + ".b"] = lp.weights, lp.bias

    def featmap():
        out, cache = net.forward(img)
        return float((out * u).sum()), _flat(net.backward(cache, u))
    checks["featmap"] = (featmap, arrays, lambda: float((net(img) * u).sum()))

    cfg = ModelConfig(num_classes=3, featmap=SUITE_FEATMAP,
                      relations=(RangeBoxSpec("surrounding", 0.5), RangeBoxSpec("above_below", 0.7)),
                      unary_hidden=5, pairwise_hidden=6, seed=int(rng.integers(2 ** 31)))
    params = cfg.init_params()
    sample = Sample(rng.random((6, 6, 3)), rng.integers(0, 3, (6, 6)), "check")
    graph = cfg.graph_for_image(6, 6)

    def piecewise():
        loss, grads = piecewise_loss_and_grads(sample, params, graph)
        return loss.total, _flat(grads)
    checks["piecewise_loss"] = (piecewise, params.blocks(), lambda: piecewise_loss(sample, params, graph).total)

    small = ModelConfig(num_classes=2, featmap=SUITE_FEATMAP, relations=cfg.relations, unary_hidden=5,
                        pairwise_hidden=6, seed=cfg.seed)
    sparams = small.init_params()
    ssample = Sample(sample.image, rng.integers(0, 2, (6, 6)), "check")
    sgraph = small.graph_for_image(6, 6)

    def exact_nll():
        loss, grads = full_nll_loss_and_grads(ssample, sparams, sgraph)
        return loss, _flat(grads)
    checks["exact_nll"] = (exact_nll, sparams.blocks(), lambda: full_nll_loss(ssample, sparams, sgraph))
    return checks


def run_suite(seeds=range(20), tolerance=1e-5, max_per_block=6, log=None):
    """Check every layer and both objectives on each seed; returns a list of :class:`CheckResult`."""
    results = []
    t0 = time.perf_counter()
    for seed in seeds:
        rng = np.random.default_rng(seed)
        checks = {**_layer_checks(rng), **_model_checks(rng)}
        for name, (fn, arrays, *value_fn) in checks.items():
            rep = nn.grad_check(fn, arrays, tolerance=tolerance, max_per_block=max_per_block, rng=rng,
                                value_fn=value_fn[0] if value_fn else None)
            results.append(CheckResult(name, seed, rep.max_rel_error, rep.passed))
            if log is not None:
                log(f"{name}\tseed {seed}\tmax_rel_error {rep.max_rel_error:.2e}\t"
                    f"{'ok' if rep.passed else 'FAIL'}\t{time.perf_counter() - t0:.1f}s")
    return results
