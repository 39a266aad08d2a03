"""Command-line front end: ``python -m ctxcrf <command>`` or ``ctxcrf <command>``.

Commands: synth, train, predict, eval, inspect, gradcheck.  Exit codes are
0 success, 2 usage error, 3 bad configuration, 4 missing or unreadable file,
5 failed check.  ``CTXCRF_THREADS`` caps the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import checkpoint
from . import config as cfgmod
from .data import CLASS_NAMES, DatasetError, load_dataset, read_manifest, read_netpbm, save_dataset, \
    gen_synthetic, write_netpbm
from .graph import describe
from .metrics import ConfusionMatrix, EmptyEvaluationError, report_json, report_tsv
from .model import load_params, predict, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_CHECK = 0, 2, 3, 4, 5
THREADS_ENV = "CTXCRF_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(args, base=None) -> cfgmod.RunConfig:
    doc = cfgmod.RunConfig().to_dict() if base is None else base
    if getattr(args, "config", None):
        with open(args.config) as fh:
            text = fh.read()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise cfgmod.ConfigError(f"{args.config}: not valid JSON: {exc}") from exc
        cfgmod.from_dict(doc)   # validate the file on its own before overrides
    return cfgmod.from_dict(cfgmod.apply_overrides(doc, getattr(args, "set", None) or []))


def _header(cfg: cfgmod.RunConfig) -> dict:
    return {"config": cfg.to_dict()}


def _load_model(path):
    blocks, header = checkpoint.load(path)
    if "config" not in header:
        raise checkpoint.CheckpointError(f"{path}: checkpoint header has no config")
    cfg = cfgmod.from_dict(header["config"])
    return cfg, load_params(blocks, cfg.model)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args, out):
    cfg = _config(args)
    rng = np.random.default_rng(cfg.seed if args.seed is None else args.seed)
    samples = gen_synthetic(cfg.synth, args.n, rng, args.prefix)
    path = save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {path}", file=out)


def cmd_train(args, out):
    from .training import train
    if args.ablation:
        from .experiments import TABLE_HEADER, format_table, preset_dict, run_ablation, synthetic_split
        cfg = _config(args, base=preset_dict())
        if args.manifest:
            train_s = load_dataset(args.manifest, cfg.model.num_classes)
            if not args.test_manifest:
                raise UsageError("--ablation with --manifest also needs --test-manifest")
            test_s = load_dataset(args.test_manifest, cfg.model.num_classes)
        else:
            train_s, test_s = synthetic_split(cfg, args.n_train, args.n_test)
        print(TABLE_HEADER, file=out, flush=True)
        rows = run_ablation(cfg, train_s, test_s, log=lambda line: print(line, file=out, flush=True))
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            with open(os.path.join(args.out, "ablation.tsv"), "w") as fh:
                fh.write(format_table(rows))
        return
    cfg = _config(args)
    if not args.manifest or not args.out:
        raise UsageError("train needs --manifest and --out (or --ablation)")
    samples = load_dataset(args.manifest, cfg.model.num_classes)
    if not samples:
        raise DatasetError(f"{args.manifest}: no samples")
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "train.log"), "w") as log_fh:
        params = train(samples, cfg.model, cfg.train,
                       log=lambda line: (log_fh.write(line + "\n"), log_fh.flush()),
                       timestamps=not args.no_timestamps)
    save_checkpoint(os.path.join(args.out, "model.ckpt"), params, _header(cfg))
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        fh.write(cfg.dumps())
    print(f"wrote {os.path.join(args.out, 'model.ckpt')}", file=out)


def cmd_predict(args, out):
    cfg, params = _load_model(args.checkpoint)
    if args.set:
        cfg = cfgmod.from_dict(cfgmod.apply_overrides(cfg.to_dict(), args.set))
    refine = cfg.refine
    if args.no_refine:
        refine = cfgmod.RefineConfig(**{**refine.to_dict(), "enabled": False})
    os.makedirs(args.out, exist_ok=True)
    n = 0
    for sid, image_path, _ in read_manifest(args.manifest):
        img = read_netpbm(image_path)
        if img.ndim != 3:
            raise DatasetError(f"{image_path}: expected a color (P6) image")
        labels, coarse = predict(params, img.astype(np.float64) / 255.0, cfg.model, refine)
        write_netpbm(os.path.join(args.out, f"{sid}.pgm"), labels.astype(np.uint8))
        if args.scores:
            np.save(os.path.join(args.out, f"{sid}.scores.npy"), coarse)
        n += 1
    print(f"wrote {n} label masks to {args.out}", file=out)


def cmd_eval(args, out):
    cfg = _config(args)
    K = cfg.model.num_classes
    cm = ConfusionMatrix.zeros(K)
    for sid, _, mask_path in read_manifest(args.manifest):
        gt = read_netpbm(mask_path)
        pred = read_netpbm(os.path.join(args.predictions, f"{sid}.pgm"))
        cm = cm + ConfusionMatrix.from_masks(pred, gt, K)
    names = list(CLASS_NAMES[:K]) if K <= len(CLASS_NAMES) else None
    text = report_tsv(cm, names)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    if args.json:
        with open(args.json, "w") as fh:
            fh.write(report_json(cm))
    out.write(text)


def cmd_inspect(args, out):
    cfg = _config(args)
    if args.checkpoint:
        cfg, _ = _load_model(args.checkpoint)
    if args.feature_size:
        h, w = args.feature_size
        graph = cfg.model.graph_for(h, w)
    else:
        h, w = args.image_size or (cfg.synth.image_size, cfg.synth.image_size)
        graph = cfg.model.graph_for_image(h, w)
    out.write(describe(graph))


def cmd_gradcheck(args, out):
    from .gradsuite import run_suite
    results = run_suite(range(args.seeds), tolerance=args.tolerance,
                        log=(lambda line: print(line, file=out, flush=True)) if args.verbose else None)
    failed = [r for r in results if not r.passed]
    worst = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.max_rel_error)
    for name, err in worst.items():
        print(f"{name}\tmax_rel_error {err:.2e}", file=out)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed", file=out)
    if failed:
        raise CheckFailed(f"{len(failed)} gradient checks failed")


class CheckFailed(Exception):
    pass


# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="ctxcrf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. train.epochs=3 (repeatable)")
        return sp

    s = with_config(sub.add_parser("synth", help="write a synthetic dataset and manifest"))
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--prefix", default="synth")
    s.add_argument("--seed", type=int)

    s = with_config(sub.add_parser("train", help="train a model from a manifest"))
    s.add_argument("--manifest")
    s.add_argument("--out")
    s.add_argument("--no-timestamps", action="store_true", help="write '-' instead of wall time in the log")
    s.add_argument("--ablation", action="store_true", help="train and evaluate the five ablation rows")
    s.add_argument("--test-manifest")
    s.add_argument("--n-train", type=int, default=200)
    s.add_argument("--n-test", type=int, default=50)

    s = sub.add_parser("predict", help="write label masks for every image in a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scores", action="store_true", help="also save coarse marginals as .scores.npy")
    s.add_argument("--no-refine", action="store_true")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")

    s = with_config(sub.add_parser("eval", help="score predicted masks against a manifest"))
    s.add_argument("--manifest", required=True)
    s.add_argument("--predictions", required=True)
    s.add_argument("--out", help="tab-separated report path")
    s.add_argument("--json", help="JSON report path")

    s = with_config(sub.add_parser("inspect", help="print CRF graph statistics"))
    s.add_argument("--checkpoint")
    s.add_argument("--image-size", type=int, nargs=2, metavar=("H", "W"))
    s.add_argument("--feature-size", type=int, nargs=2, metavar=("H", "W"))

    s = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--tolerance", type=float, default=1e-5)
    s.add_argument("--verbose", action="store_true")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval,
            "inspect": cmd_inspect, "gradcheck": cmd_gradcheck}


def _limit_threads():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def run(argv=None, out=None, err=None) -> int:
    out = sys.stdout if out is None else out
    err = sys.stderr if err is None else err
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing command; choose one of " + ", ".join(COMMANDS))
        limiter = _limit_threads()
        try:
            COMMANDS[args.command](args, out)
        finally:
            if limiter is not None:
                limiter.unregister()
    except UsageError as exc:
        print(f"usage error: {exc}", file=err)
        return EXIT_USAGE
    except (cfgmod.ConfigError, checkpoint.CheckpointError) as exc:
        print(f"config error: {exc}", file=err)
        return EXIT_CONFIG
    except (OSError, DatasetError) as exc:
        print(f"I/O error: {exc}", file=err)
        return EXIT_IO
    except (CheckFailed, EmptyEvaluationError) as exc:
        print(f"check failed: {exc}", file=err)
        return EXIT_CHECK
    return EXIT_OK


def main():
    sys.exit(run())
