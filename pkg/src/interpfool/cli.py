"""Command-line front end: ``interpfool <subcommand> [flags]``.

Every command writes a ``*.manifest.json`` next to its main output that
records the flag set, seeds, input/output checkpoint hashes, the dataset
fingerprint and the tool version. Manifests contain no timestamps, so
identical invocations produce identical files.

Exit status: 0 on success, 2 for usage problems (bad flags, missing files,
invalid configuration), 1 for runtime failures. Errors are printed as one
line: ``error: <code>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .data import Dataset, DatasetError, IdxError, NormStats, load_idx_dir, load_image_dir, read_idx_images, write_digits_corpus, write_idx
from .fooling import (FoolingConfig, FoolingDiverged, FoolingError, build_composite_dataset, build_frame_mask,
                      finetune, train_baseline)
from .interpreters import InterpreterError, heatmap_array, parse_interpreter
from .metrics import FsrSpec, MetricError, accuracy, aopc_curve, fsr, gaussian_perturb_probe, test_losses
from .model import (ArchError, CheckpointError, build_model, file_sha256, init_params, load_checkpoint,
                    save_checkpoint, smallnet)
from .pnm import PnmError
from .report import emit_report, export_heatmap_image, write_json

logger = logging.getLogger("interpfool")

# Desk-scale defaults found by tuning on the 28x28 digits corpus with SmallNet.
DEFAULT_LAMBDA = {"location": 10.0, "topk": 3.0, "centermass": 0.15, "active": 30.0}
DEFAULT_LR = 0.005


class UsageError(Exception):
    code = "usage"


# ---------------------------------------------------------------------------
# helpers


def _need_file(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    if not os.path.exists(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def load_data(root, split: str = "train", size=(28, 28), channels: int = 1) -> Dataset:
    """IDX pair ``<split>-images-idx3-ubyte`` under ``root``, else ``root/<split>/<class>/*``, else ``root/<class>/*``."""
    _need_file(root, "data")
    if os.path.exists(os.path.join(root, f"{split}-images-idx3-ubyte")):
        return load_idx_dir(root, split)
    sub = os.path.join(root, split)
    return load_image_dir(sub if os.path.isdir(sub) else root, size, channels)


def _normalized(ds: Dataset, desc) -> Dataset:
    if desc.norm is None:
        return ds
    return ds.normalized(NormStats.from_dict(desc.norm))


def _load_ckpt(path, what="ckpt"):
    _need_file(path, what)
    params, desc = load_checkpoint(path)
    return params, desc, build_model(desc)


def _model_data(args, desc, split):
    c, h, w = desc.input_shape
    return _normalized(load_data(args.data, split, (h, w), c), desc)


def _limit(ds: Dataset, n):
    return ds if n is None or n >= len(ds) else ds.subset(np.arange(n))


def _interp(args, name=None):
    kw = {}
    if getattr(args, "target_layer", None):
        kw["target_layer"] = args.target_layer
    return parse_interpreter(name or args.interpreter, **kw)


def _manifest(path, args, inputs=(), outputs=(), datasets=(), extra=None):
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    m = {
        "command": args.command,
        "flags": flags,
        "seeds": {k: v for k, v in flags.items() if k.endswith("seed")},
        "inputs": {os.path.basename(p): file_sha256(p) for p in inputs if p},
        "outputs": {os.path.basename(p): file_sha256(p) for p in outputs if p},
        "datasets": {name: ds.fingerprint() for name, ds in datasets},
        "version": __version__,
    }
    if extra:
        m["extra"] = extra
    write_json(os.fspath(path) + ".manifest.json", m)


def _emit(obj, out=None):
    text = json.dumps(obj, sort_keys=True, indent=2)
    if out:
        write_json(out, obj)
    print(text)


def _load_composites(root):
    meta_path = os.path.join(_need_file(root, "fool-data"), "compose.json")
    _need_file(meta_path, "fool-data")
    with open(meta_path) as f:
        meta = json.load(f)
    imgs = {}
    for split in ("train", "holdout"):
        raw = read_idx_images(os.path.join(root, f"{split}-images-idx3-ubyte"))
        imgs[split] = raw[:, None].astype(np.float32) / 255.0
    return imgs, meta


# ---------------------------------------------------------------------------
# commands


def cmd_make_data(args):
    write_digits_corpus(args.out, n_train=args.n_train, n_test=args.n_test, size=args.size, seed=args.seed)
    print(json.dumps({"out": args.out, "n_train": args.n_train, "n_test": args.n_test}))


def cmd_train(args):
    raw = load_data(args.data, "train")
    if args.arch != "smallnet":
        raise UsageError(f"unknown architecture {args.arch!r}")
    c, h, w = raw.image_shape
    desc = smallnet(raw.num_classes, (c, h, w))
    stats = raw.fit_norm()
    desc.norm = stats.to_dict()
    tr = raw.normalized(stats)
    model = build_model(desc)
    params = init_params(model, args.seed)
    params, _ = train_baseline(model, params, tr, epochs=args.epochs, lr=args.lr, momentum=args.momentum,
                               batch_size=args.batch_size, seed=args.seed, log_path=args.log)
    save_checkpoint(args.out, params, desc)
    result = {"train_acc": accuracy(model, params, tr)}
    try:
        te = _normalized(load_data(args.data, "test", (h, w), c), desc)
        result["test_acc"] = accuracy(model, params, te)
    except (DatasetError, FileNotFoundError, UsageError):
        te = None
    _manifest(args.out, args, outputs=[args.out], datasets=[("train", tr)], extra=result)
    _emit(result)


def cmd_fool(args):
    params, desc, model = _load_ckpt(args.ckpt)
    tr = _model_data(args, desc, "train")
    spec = _interp(args)
    lam = DEFAULT_LAMBDA[args.method] if args.lam is None else args.lam
    fool_images = None
    c1, c2 = args.c1, args.c2
    if args.method == "active":
        imgs, meta = _load_composites(args.fool_data)
        c1 = meta["c1"] if c1 is None else c1
        c2 = meta["c2"] if c2 is None else c2
        fool_images = _normalized(Dataset(imgs["train"], None, desc.num_classes), desc).images
    cfg = FoolingConfig(args.method, spec, lam=lam, lr=args.lr, momentum=args.momentum, iterations=args.iters,
                        batch_size=args.batch_size, fool_batch_size=args.fool_batch_size, k_percent=args.k,
                        c1=c1, c2=c2, seed=args.seed, checkpoint_every=args.checkpoint_every)
    log = args.log or os.fspath(args.out) + ".log.csv"
    ckdir = os.path.splitext(args.out)[0] + "-checkpoints" if args.checkpoint_every else None
    try:
        fooled, _ = finetune(model, params, tr, cfg, fool_images=fool_images, log_path=log,
                             checkpoint_dir=ckdir, desc=desc)
    except FoolingDiverged as e:
        save_checkpoint(args.out, e.params, desc)
        raise
    save_checkpoint(args.out, fooled, desc)
    _manifest(args.out, args, inputs=[args.ckpt], outputs=[args.out, log], datasets=[("train", tr)],
              extra={"config": cfg.to_dict()})
    _emit({"out": args.out, "log": log, "lambda": lam, "lr": args.lr})


def cmd_eval(args):
    params, desc, model = _load_ckpt(args.ckpt)
    ds = _model_data(args, desc, args.split)
    res = {"top1": accuracy(model, params, ds, 1, args.cls)}
    if desc.num_classes >= 5:
        res["top5"] = accuracy(model, params, ds, 5, args.cls)
    _emit(res, args.out)
    if args.out:
        _manifest(args.out, args, inputs=[args.ckpt], datasets=[(args.split, ds)])


def cmd_fsr(args):
    p0, desc, model = _load_ckpt(args.original, "original")
    pf, _, _ = _load_ckpt(args.fooled, "fooled")
    if args.method == "active":
        imgs, meta = _load_composites(args.fool_data)
        c1 = meta["c1"] if args.c1 is None else args.c1
        c2 = meta["c2"] if args.c2 is None else args.c2
        ds = _normalized(Dataset(imgs["holdout"], None, desc.num_classes), desc)
    else:
        c1, c2 = args.c1, args.c2
        ds = _limit(_model_data(args, desc, args.split), args.limit)
    if (args.r_lo is None) != (args.r_hi is None):
        raise UsageError("--r-lo and --r-hi must be given together")
    r = FsrSpec(args.method, args.r_lo, args.r_hi) if args.r_lo is not None else FsrSpec.default(args.method)
    records = []
    for name in args.interpreter.split(","):
        spec = _interp(args, name)
        mask = build_frame_mask(*args.mask_shape) if args.mask_shape else None
        records += test_losses(args.method, model, pf, p0, ds, spec, mask=mask, k_percent=args.k, c1=c1, c2=c2, r=r)
    te = None
    if args.method == "active":
        base_acc = fool_acc = float("nan")
        try:
            te = _model_data(args, desc, args.split)
            base_acc, fool_acc = accuracy(model, p0, te), accuracy(model, pf, te)
        except (UsageError, DatasetError, FileNotFoundError, TypeError):
            pass
    else:
        base_acc, fool_acc = accuracy(model, p0, ds), accuracy(model, pf, ds)
    fooled_with = args.fooled_with or args.interpreter.split(",")[0]
    report = emit_report(args.out, base_acc, fool_acc, {fooled_with: records},
                         extra={"method": args.method, "range": [r.lo, r.hi], "k_percent": args.k})
    _manifest(os.path.join(args.out, "report.json"), args, inputs=[args.original, args.fooled],
              datasets=[("eval", ds)])
    _emit({"fsr_table": report["fsr_table"], "baseline_acc": base_acc, "fooled_acc": fool_acc})


def cmd_heatmap(args):
    from .data import _coerce_channels, _decode_image, _resize_nearest

    params, desc, model = _load_ckpt(args.ckpt)
    _need_file(args.image, "image")
    c, h, w = desc.input_shape
    try:
        img = _decode_image(args.image)
    except (PnmError, OSError, ValueError) as e:
        raise UsageError(f"cannot decode image {args.image}: {e}") from None
    img = _coerce_channels(_resize_nearest(img, h, w), c).transpose(2, 0, 1)[None].astype(np.float32) / 255.0
    ds = _normalized(Dataset(img, None, desc.num_classes), desc)
    spec = _interp(args)
    hm = heatmap_array(model, params, ds.images, [args.cls], spec)[0]
    if hm.ndim == 3:
        hm = hm.sum(axis=0)
    export_heatmap_image(hm, args.out, args.style, out_shape=(h, w))
    _manifest(args.out, args, inputs=[args.ckpt, args.image], outputs=[args.out])
    _emit({"out": args.out, "shape": list(hm.shape)})


def cmd_aopc(args):
    params, desc, model = _load_ckpt(args.ckpt)
    ds = _limit(_model_data(args, desc, args.split), args.limit)
    spec = _interp(args)
    if args.source == "random":
        curve = aopc_curve(model, params, ds, "random", None, spec, args.steps, args.region, args.seed)
    else:
        src = params
        if args.source == "original":
            src, _, _ = _load_ckpt(args.original, "original")
        curve = aopc_curve(model, params, ds, "heatmap", src, spec, args.steps, args.region, args.seed)
    res = {"source": args.source, "curve": [float(v) for v in curve], "final": float(curve[-1])}
    _emit(res, args.out)
    if args.out:
        _manifest(args.out, args, inputs=[args.ckpt, args.original], datasets=[("eval", ds)])


def cmd_perturb(args):
    params, desc, model = _load_ckpt(args.ckpt)
    ds = _limit(_model_data(args, desc, args.split), args.limit)
    sigmas = [float(s) for s in args.sigmas.split(",")]
    curve = gaussian_perturb_probe(model, params, ds, sigmas, args.trials, args.seed, not args.absolute)
    _emit({"curve": curve}, args.out)
    if args.out:
        _manifest(args.out, args, inputs=[args.ckpt], datasets=[("eval", ds)])


def cmd_compose(args):
    base = load_data(args.data, args.split)
    train, hold = build_composite_dataset(base, args.c1, args.c2, args.n, args.seed)
    os.makedirs(args.out, exist_ok=True)
    for name, cs in (("train", train), ("holdout", hold)):
        imgs = np.round(cs.images[:, 0] * 255).astype(np.uint8)
        write_idx(os.path.join(args.out, f"{name}-images-idx3-ubyte"),
                  os.path.join(args.out, f"{name}-quadrants-idx1-ubyte"), imgs, cs.quadrants.ravel())
    meta = {"c1": args.c1, "c2": args.c2, "n_train": len(train), "n_holdout": len(hold), "seed": args.seed,
            "quadrant_order": ["top-left", "top-right", "bottom-left", "bottom-right"]}
    write_json(os.path.join(args.out, "compose.json"), meta)
    _manifest(os.path.join(args.out, "compose.json"), args, datasets=[("base", base)])
    _emit(meta)


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    """Reports usage errors on a single line."""

    def error(self, message):
        self.exit(2, f"error: usage: {self.prog}: {' '.join(message.split())}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="interpfool", description="Saliency-map fooling testbench.")
    p.add_argument("--config", help="JSON file of flag defaults; explicit flags win")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        return sp

    s = add("make-data", cmd_make_data, "write the desk-scale digits corpus as IDX files")
    s.add_argument("--out", required=True)
    s.add_argument("--n-train", type=int, default=8000)
    s.add_argument("--n-test", type=int, default=2000)
    s.add_argument("--size", type=int, default=28)
    s.add_argument("--seed", type=int, default=0)

    s = add("train", cmd_train, "train a baseline classifier")
    s.add_argument("--data", required=True)
    s.add_argument("--arch", default="smallnet")
    s.add_argument("--epochs", type=int, default=6)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--log")
    s.add_argument("--out", required=True)

    s = add("fool", cmd_fool, "fine-tune a checkpoint to fool an interpreter")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--method", required=True, choices=["location", "topk", "centermass", "active"])
    s.add_argument("--interpreter", required=True)
    s.add_argument("--target-layer")
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--lr", type=float, default=DEFAULT_LR)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--iters", type=int, default=500)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--fool-batch-size", type=int, default=16)
    s.add_argument("--k", type=float, default=10.0)
    s.add_argument("--c1", type=int)
    s.add_argument("--c2", type=int)
    s.add_argument("--fool-data")
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--log")
    s.add_argument("--out", required=True)

    s = add("eval", cmd_eval, "classification accuracy")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--class", dest="cls", type=int)
    s.add_argument("--out")

    s = add("fsr", cmd_fsr, "per-sample test losses and fooling success rates")
    s.add_argument("--original", required=True)
    s.add_argument("--fooled", required=True)
    s.add_argument("--method", required=True, choices=["location", "topk", "centermass", "active"])
    s.add_argument("--interpreter", required=True, help="comma-separated list of evaluated interpreters")
    s.add_argument("--fooled-with", help="interpreter used during fooling (row label)")
    s.add_argument("--target-layer")
    s.add_argument("--data")
    s.add_argument("--split", default="test")
    s.add_argument("--fool-data")
    s.add_argument("--limit", type=int)
    s.add_argument("--k", type=float, default=10.0)
    s.add_argument("--c1", type=int)
    s.add_argument("--c2", type=int)
    s.add_argument("--mask-shape", type=int, nargs=2)
    s.add_argument("--r-lo", type=float)
    s.add_argument("--r-hi", type=float)
    s.add_argument("--out", required=True)

    s = add("heatmap", cmd_heatmap, "render one heatmap as PGM/PPM")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--class", dest="cls", type=int, required=True)
    s.add_argument("--interpreter", required=True)
    s.add_argument("--target-layer")
    s.add_argument("--style", choices=["gray", "diverging"], default="gray")
    s.add_argument("--out", required=True)

    s = add("aopc", cmd_aopc, "area over the perturbation curve")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--source", choices=["original", "fooled", "random"], required=True)
    s.add_argument("--original", help="checkpoint supplying heatmaps for --source original")
    s.add_argument("--interpreter", default="gradcam")
    s.add_argument("--target-layer")
    s.add_argument("--steps", type=int, default=60)
    s.add_argument("--region", type=int, default=2)
    s.add_argument("--limit", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")

    s = add("perturb", cmd_perturb, "accuracy under Gaussian weight noise")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--sigmas", default="0,0.001,0.003,0.01")
    s.add_argument("--absolute", action="store_true", help="sigmas are absolute rather than relative to weight RMS")
    s.add_argument("--trials", type=int, default=5)
    s.add_argument("--limit", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")

    s = add("compose", cmd_compose, "build the two-class composite set for active fooling")
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--c1", type=int, required=True)
    s.add_argument("--c2", type=int, required=True)
    s.add_argument("--n", type=int, default=260)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    return p


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    if not os.path.exists(known.config):
        raise UsageError(f"config not found: {known.config}")
    try:
        with open(known.config) as f:
            cfg = json.load(f)
    except json.JSONDecodeError as e:
        raise UsageError(f"invalid config {known.config}: {e}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    if "lambda" in cfg:
        cfg["lam"] = cfg.pop("lambda")
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for sp in sub.choices.values():
        dests = {a.dest for a in sp._actions}
        sp.set_defaults(**{k: v for k, v in cfg.items() if k in dests})
        for a in sp._actions:
            if a.dest in cfg:
                a.required = False


def _fail(code, msg, status):
    print(f"error: {code}: {' '.join(str(msg).split())}", file=sys.stderr)
    return status


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except UsageError as e:
        return _fail("usage", e, 2)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as e:
        return _fail("usage", e, 2)
    except (FoolingError, InterpreterError, ArchError) as e:
        return _fail("config", e, 2)
    except CheckpointError as e:
        return _fail(getattr(e, "code", "checkpoint"), e, 1)
    except IdxError as e:
        return _fail(e.code, e, 1)
    except FoolingDiverged as e:
        return _fail("diverged", e, 1)
    except (DatasetError, MetricError, PnmError, ValueError, OSError) as e:
        return _fail(type(e).__name__, e, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
