"""Command-line entry point: train / enhance / eval / gradcheck.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric abort,
5 gradient-check failure. Every subcommand echoes its fully resolved
configuration to stdout before doing any work.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import model as M
from . import training as TR
from .backend import BACKEND
from .formats import FormatError, read_image, read_weights, write_image
from .gradcheck import run_suite
from .metrics import evaluate_dir
from .tensor import Tensor

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 2, 3, 4, 5


def _echo_config(sub, args):
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    print(f"[{sub}] backend={BACKEND} " +
          " ".join(f"{k}={v}" for k, v in resolved.items()))


def build_parser():
    p = argparse.ArgumentParser(prog="stsc",
                                description="underwater image enhancement network")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True, help="dataset dir with input/ and gt/")
    t.add_argument("--vgg", required=True, help="STSCW VGG weights file")
    t.add_argument("--out", required=True, help="checkpoint output path")
    t.add_argument("--iters", type=int, default=100_000)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--crop", type=int, default=224)
    t.add_argument("--lr", type=float, default=5e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--c0", type=int, default=16)
    t.add_argument("--sem", type=int, default=64)
    t.add_argument("--lambda", dest="lam", type=float, default=0.8)
    t.add_argument("--ablation", choices=sorted(M.ABLATIONS), default="full")
    t.add_argument("--embed", choices=["encoder", "decoder"], default="decoder")
    t.add_argument("--resume", default=None)
    t.add_argument("--checkpoint-interval", type=int, default=1000)
    t.add_argument("--log-interval", type=int, default=1)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="enhance an image or directory")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--in", dest="input", required=True)
    e.add_argument("--out", dest="output", required=True)
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("eval", help="compute metrics over a directory")
    v.add_argument("--enh", required=True)
    v.add_argument("--ref", default=None)
    v.add_argument("--metrics", default="psnr,ssim,uiqm")
    v.add_argument("--report", required=True)
    v.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference verification suite")
    g.add_argument("--scale", choices=["tiny"], default="tiny")
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--precision", choices=["double"], default="double")
    g.add_argument("--coords", type=int, default=100)
    g.add_argument("--seed", type=int, default=7)
    g.set_defaults(func=cmd_gradcheck)

    return p


def cmd_train(args):
    model_cfg = M.ModelConfig(base_channels=args.c0, sem_channels=args.sem,
                              lam=args.lam, embed_site=args.embed)
    try:
        model_cfg = model_cfg.with_ablation(args.ablation)
    except M.ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    train_cfg = TR.TrainConfig(iters=args.iters, batch=args.batch, crop=args.crop,
                               lr0=args.lr, seed=args.seed,
                               checkpoint_interval=args.checkpoint_interval,
                               log_interval=args.log_interval)
    try:
        train_cfg.validate()
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    vgg = None
    if model_cfg.branch_mode != "none":
        try:
            vgg = read_weights(args.vgg)
        except (OSError, FormatError) as e:
            print(f"error: cannot load VGG weights: {e}", file=sys.stderr)
            return EXIT_DATA
    try:
        TR.train(model_cfg, train_cfg, args.data, vgg, args.out,
                 resume_path=args.resume)
    except (OSError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TR.TrainAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


def _enhance_one(model, in_path, out_path):
    x = read_image(in_path)
    n, c, h, w = x.shape
    ph = (16 - h % 16) % 16
    pw = (16 - w % 16) % 16
    padded = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    y = model.forward(Tensor(padded.astype(model.dtype)))
    write_image(Tensor(y.data[:, :, :h, :w]), out_path)


def cmd_enhance(args):
    try:
        model, _ = TR.load_model_from_checkpoint(args.ckpt)
    except (OSError, FormatError) as e:
        print(f"error: cannot load checkpoint: {e}", file=sys.stderr)
        return EXIT_DATA
    if os.path.isdir(args.input):
        os.makedirs(args.output, exist_ok=True)
        names = sorted(f for f in os.listdir(args.input) if f.lower().endswith(".ppm"))
        if not names:
            print("error: no .ppm inputs found", file=sys.stderr)
            return EXIT_DATA
        failures = []
        for name in names:
            try:
                _enhance_one(model, os.path.join(args.input, name),
                             os.path.join(args.output, name))
            except (OSError, FormatError) as e:
                failures.append(f"{name}: {e}")
        for f in failures:
            print(f"failed: {f}", file=sys.stderr)
        return 0 if not failures else EXIT_DATA
    try:
        _enhance_one(model, args.input, args.output)
    except (OSError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    return 0


def cmd_eval(args):
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    try:
        report = evaluate_dir(args.enh, args.ref, metrics)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    report.write_csv(args.report)
    if not report.rows:
        print("error: no images evaluated", file=sys.stderr)
        return EXIT_DATA
    means = {k: report.mean(k) for k in ("psnr_db", "ssim", "uiqm")}
    print(" ".join(f"mean_{k}={v}" for k, v in means.items() if v is not None))
    return 0


def cmd_gradcheck(args):
    ok, results = run_suite(tol=args.tol, n_coords=args.coords, seed=args.seed)
    if not ok:
        worst = max(results, key=results.get)
        print(f"gradcheck failed; worst component: {worst} "
              f"(max_rel_err={results[worst]:.3e})", file=sys.stderr)
        return EXIT_GRADCHECK
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    _echo_config(args.command, args)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
