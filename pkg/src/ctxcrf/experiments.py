"""Ablation and pairwise-versus-ensemble experiments on the synthetic context task.

Every ablation row is the previous row's :class:`RunConfig` with one field
changed, so rows differ only by configuration.  Rows whose model and training
settings match an earlier row reuse that row's trained parameters.
"""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, apply_overrides, from_dict
from .data import AMBIGUOUS, gen_synthetic
from .metrics import ConfusionMatrix, class_iou
from .model import predict
from .training import train

ABLATION_ROWS = ("baseline", "+pyramid", "+multiscale", "+refine", "+pairwise")

# Desk-scale settings for the synthetic task: 32-pixel scenes give 8x8 feature
# maps, so the pooling windows are shrunk to match, and with about 40 factors
# per node the pairwise terms are scaled down to keep them from swamping the
# unaries at inference time.
PRESET_OVERRIDES = (
    "train.epochs=25",
    'train.group_lr={"0": 0.02, "1": 0.02}',
    "train.lr_schedule=linear",
    "model.featmap.pyramid_windows=[3, 5]",
    "model.pairwise_weight=0.03",
    "synth.max_object_height=2",
    "synth.scene_background=true",
)


def preset_dict(base: dict | None = None) -> dict:
    """Config document with the synthetic-task preset applied on top of ``base``."""
    return apply_overrides(RunConfig().to_dict() if base is None else base, PRESET_OVERRIDES)


def preset_config() -> RunConfig:
    return from_dict(preset_dict())


@dataclass
class RowResult:
    name: str
    pixel_accuracy: float
    mean_accuracy: float
    iou: float
    ambiguous_iou: float
    train_seconds: float


def ablation_configs(full: RunConfig):
    """Cumulative rows ending at ``full``; earlier rows switch features off one at a time."""
    m, fm = full.model, full.model.featmap
    off_refine = dataclasses.replace(full.refine, enabled=False)
    no_pair = dataclasses.replace(m, relations=())
    single = dataclasses.replace(fm, scales=(1.0,))
    rows = [
        dataclasses.replace(full, refine=off_refine,
                            model=dataclasses.replace(no_pair, featmap=dataclasses.replace(single, pyramid_windows=()))),
        dataclasses.replace(full, refine=off_refine, model=dataclasses.replace(no_pair, featmap=single)),
        dataclasses.replace(full, refine=off_refine, model=no_pair),
        dataclasses.replace(full, model=no_pair),
        full,
    ]
    return list(zip(ABLATION_ROWS, rows))


def evaluate_params(params, cfg: RunConfig, samples):
    cm = ConfusionMatrix.zeros(cfg.model.num_classes)
    for s in samples:
        labels, _ = predict(params, s.image, cfg.model, cfg.refine)
        cm = cm + ConfusionMatrix.from_masks(labels, s.mask, cfg.model.num_classes)
    return cm


def _train_key(cfg: RunConfig):
    d = cfg.to_dict()
    return json.dumps({"model": d["model"], "train": d["train"]}, sort_keys=True)


def run_ablation(full: RunConfig, train_samples, test_samples, log=None):
    trained = {}
    results = []
    for name, cfg in ablation_configs(full):
        key = _train_key(cfg)
        t0 = time.perf_counter()
        if key not in trained:
            trained[key] = train(train_samples, cfg.model, cfg.train)
        seconds = time.perf_counter() - t0
        cm = evaluate_params(trained[key], cfg, test_samples)
        pa, ma, iou = cm.scores()
        row = RowResult(name, pa, ma, iou, class_iou(cm, AMBIGUOUS), seconds)
        results.append(row)
        if log is not None:
            log(format_row(row))
    return results


TABLE_HEADER = "method\tpixel_acc\tmean_acc\tiou\tiou_ambiguous\ttrain_s"


def format_row(r: RowResult) -> str:
    return (f"{r.name}\t{100 * r.pixel_accuracy:.1f}\t{100 * r.mean_accuracy:.1f}\t{100 * r.iou:.1f}\t"
            f"{100 * r.ambiguous_iou:.1f}\t{r.train_seconds:.1f}")


def format_table(rows) -> str:
    return "\n".join([TABLE_HEADER] + [format_row(r) for r in rows]) + "\n"


def synthetic_split(cfg: RunConfig, n_train=200, n_test=50):
    rng = np.random.default_rng(cfg.seed)
    return (gen_synthetic(cfg.synth, n_train, rng, "train"), gen_synthetic(cfg.synth, n_test, rng, "test"))


def ensemble_configs(full: RunConfig):
    """(1 unary + 1 surrounding pairwise, 2-unary ensemble), both without refinement."""
    off = dataclasses.replace(full.refine, enabled=False)
    pair_rel = tuple(r for r in full.model.relations if r.kind == "surrounding")[:1]
    pair = dataclasses.replace(full, refine=off, model=dataclasses.replace(full.model, relations=pair_rel, num_unary=1))
    ens = dataclasses.replace(full, refine=off, model=dataclasses.replace(full.model, relations=(), num_unary=2))
    return pair, ens


def run_ensemble_comparison(full: RunConfig, seeds=range(5), n_train=200, n_test=50, log=None):
    """Mean test IoU over ``seeds`` for the pairwise model and the 2-unary ensemble."""
    out = {"pairwise": [], "ensemble": []}
    for seed in seeds:
        cfg = dataclasses.replace(full, seed=seed)
        train_s, test_s = synthetic_split(cfg, n_train, n_test)
        for name, c in zip(("pairwise", "ensemble"), ensemble_configs(cfg)):
            c = dataclasses.replace(c, model=dataclasses.replace(c.model, seed=seed),
                                    train=dataclasses.replace(c.train, seed=seed))
            params = train(train_s, c.model, c.train)
            iou = evaluate_params(params, c, test_s).scores()[2]
            out[name].append(iou)
            if log is not None:
                log(f"seed {seed}\t{name}\tiou {100 * iou:.1f}")
    return {k: float(np.mean(v)) for k, v in out.items()}, out
