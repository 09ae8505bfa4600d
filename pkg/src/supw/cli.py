"""Command-line entry point: ``supw <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every run prints its
resolved configuration as one JSON line before doing any work.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("supw")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _print_config(command, cfg: dict):
    print("config: " + json.dumps({"command": command, **cfg}, sort_keys=True, default=str), flush=True)


def _thread_limit():
    raw = os.environ.get("SUPW_THREADS")
    if raw is None or raw == "":
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SUPW_THREADS must be a positive integer, got {raw!r}") from None
    if n <= 0:
        raise UsageError(f"SUPW_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_slic(args) -> int:
    from .imaging import load_image, save_image, save_labels16, to_float
    from .slic import SlicParams, overlay, slic_image

    params = SlicParams(k=args.k, m=args.m, max_iter=args.max_iter, min_region_frac=args.min_region_frac)
    _print_config("slic", {"image": args.image, "k": params.k, "m": params.m,
                           "max_iter": params.max_iter, "min_region_frac": params.min_region_frac,
                           "labels_out": args.labels_out, "overlay_out": args.overlay_out})
    image = to_float(load_image(args.image))
    grid = slic_image(image, params)
    if args.labels_out:
        save_labels16(grid.labels, args.labels_out)
    if args.overlay_out:
        save_image(overlay(image, grid), args.overlay_out)
    print(f"regions: {grid.num_regions}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthdata import PRESETS, gen_dataset

    _print_config("synth", {"domain": args.domain, "n": args.n, "out": args.out,
                            "seed": args.seed, "size": args.size})
    if args.size % 8:
        raise UsageError(f"--size must be divisible by 8, got {args.size}")
    if args.n < 10:
        raise UsageError(f"--n must be at least 10, got {args.n}")
    manifest = gen_dataset(PRESETS[args.domain], args.n, args.out, args.seed, args.size)
    splits = [f["split"] for f in manifest["files"]]
    print(f"wrote {len(splits)} samples to {args.out} "
          f"(train {splits.count('train')}, val {splits.count('val')}, test {splits.count('test')})")
    return EXIT_OK


_TRAIN_OVERRIDES = {
    "epochs": "epochs", "seed": "seed", "lr0": "lr0", "batch_size": "batch_size",
    "input_size": "input_size", "slic_weight": "slic_weight", "slic_k": "slic_k",
    "slic_m": "slic_m", "isw_weight": "isw_weight", "warmup_epochs": "warmup_epochs",
    "slic_loss": "use_slic_loss", "isw": "use_isw",
}


def _train_config(args):
    from .train import TrainConfig

    base = {}
    if args.config:
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"config file not found: {args.config}")
        with open(args.config) as fh:
            base = json.load(fh)
    for flag, field_name in _TRAIN_OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            base[field_name] = value  # flags win over the config file
    try:
        return TrainConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None


def cmd_train(args) -> int:
    from .train import train_loop

    cfg = _train_config(args)
    val = args.val_data or args.data
    _print_config("train", {"data": args.data, "val_data": val, "out": args.out, **cfg.to_dict()})
    for d in (args.data, val):
        if not os.path.isdir(d):
            raise FileNotFoundError(f"data directory not found: {d}")

    def progress(rec):
        print(json.dumps({k: rec[k] for k in sorted(rec)}), flush=True)

    train_loop(cfg, args.data, val, args.out, progress=progress)
    print(f"best checkpoint: {os.path.join(args.out, 'best.ckpt')}")
    return EXIT_OK


def _dataset_split(data, split):
    from .synthdata import load_dataset

    has_manifest = os.path.exists(os.path.join(data, "manifest.json"))
    if split == "all" or not has_manifest:
        return load_dataset(data)
    return load_dataset(data, split)


def cmd_eval(args) -> int:
    from .imaging import resize_image, save_mask
    from .metrics import evaluate_arrays
    from .segnet import load_checkpoint
    from .train import predict_proba

    _print_config("eval", {"ckpt": args.ckpt, "data": args.data, "report": args.report,
                           "split": args.split, "threshold": args.threshold,
                           "pred_out": args.pred_out})
    if not os.path.isdir(args.data):
        raise FileNotFoundError(f"data directory not found: {args.data}")
    net, meta = load_checkpoint(args.ckpt, with_meta=True)
    size = int(meta.get("input_size", 256))
    names, images, masks = _dataset_split(args.data, args.split)
    if not names:
        raise ValueError(f"no pairs: split {args.split!r} of {args.data} is empty")
    probs = predict_proba(net, [resize_image(im, size, size) for im in images])
    full = [resize_image(np.repeat(p[..., None], 3, axis=2), *m.shape)[..., 0]
            for p, m in zip(probs, masks)]
    report = evaluate_arrays(full, masks, names, args.threshold)
    report.meta.update(ckpt=os.path.abspath(args.ckpt), data=os.path.abspath(args.data),
                       split=args.split, threshold=args.threshold)
    if args.report:
        os.makedirs(os.path.dirname(os.path.abspath(args.report)), exist_ok=True)
        with open(args.report, "w") as fh:
            fh.write(report.to_json() + "\n")
    if args.pred_out:
        os.makedirs(args.pred_out, exist_ok=True)
        for name, p in zip(names, full):
            save_mask(p >= args.threshold, os.path.join(args.pred_out, name))
    print(report.table())
    return EXIT_OK


def cmd_grid(args) -> int:
    from .synthdata import load_dataset
    from .train import format_grid, grid_search

    cfg = _train_config(args)
    _print_config("grid", {"data": args.data, "target": args.target, "out": args.out, **cfg.to_dict()})
    for d in (args.data, args.target):
        if not os.path.isdir(d):
            raise FileNotFoundError(f"data directory not found: {d}")
    _, tr_i, tr_m = load_dataset(args.data, "train")
    _, va_i, va_m = load_dataset(args.data, "val")
    _, tg_i, tg_m = load_dataset(args.target)
    rows = grid_search(cfg, (tr_i, tr_m, va_i, va_m), (tg_i, tg_m),
                       progress=lambda r: print(json.dumps(r, sort_keys=True), flush=True))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "grid.json"), "w") as fh:
        json.dump(rows, fh, indent=1, sort_keys=True)
    text = format_grid(rows)
    with open(os.path.join(args.out, "grid.txt"), "w") as fh:
        fh.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    _print_config("gradcheck", {"seed": args.seed, "h": args.h, "rel_tol": args.rel_tol,
                                "network": not args.no_network})
    results = run_suite(args.seed, args.h, args.rel_tol, include_network=not args.no_network)
    failed = 0
    for name, rep in results:
        status = "ok" if rep.passed else "FAIL"
        failed += not rep.passed
        print(f"{status:<5}{name:<24} max rel err {rep.max_rel_error:.3e}")
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_train_overrides(p):
    g = p.add_argument_group("config overrides (flags win over --config)")
    g.add_argument("--epochs", type=_positive_int)
    g.add_argument("--seed", type=int)
    g.add_argument("--lr0", type=_positive_float)
    g.add_argument("--batch-size", dest="batch_size", type=_positive_int)
    g.add_argument("--input-size", dest="input_size", type=_positive_int)
    g.add_argument("--slic-weight", dest="slic_weight", type=float)
    g.add_argument("--slic-k", dest="slic_k", type=_positive_int)
    g.add_argument("--slic-m", dest="slic_m", type=_positive_float)
    g.add_argument("--isw-weight", dest="isw_weight", type=float)
    g.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
    g.add_argument("--slic-loss", dest="slic_loss", action=argparse.BooleanOptionalAction, default=None,
                   help="enable or disable the superpixel loss")
    g.add_argument("--isw", dest="isw", action=argparse.BooleanOptionalAction, default=None,
                   help="enable or disable selective whitening")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="supw", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("slic", help="compute superpixels for one image")
    p.add_argument("--image", required=True, help="PNG or binary PPM input")
    p.add_argument("--k", type=_positive_int, default=500, help="target superpixel count")
    p.add_argument("--m", type=_positive_float, default=50.0, help="compactness")
    p.add_argument("--max-iter", dest="max_iter", type=int, default=10)
    p.add_argument("--min-region-frac", dest="min_region_frac", type=float, default=0.25)
    p.add_argument("--labels-out", dest="labels_out", help="16-bit label PNG")
    p.add_argument("--overlay-out", dest="overlay_out", help="boundary overlay PNG")
    p.set_defaults(func=cmd_slic)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--domain", choices=("source", "target"), required=True)
    p.add_argument("--n", type=_positive_int, default=200)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_positive_int, default=128)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a segmentation network")
    p.add_argument("--config", help="JSON file with training config fields")
    p.add_argument("--data", required=True, help="dataset directory (manifest train split)")
    p.add_argument("--val-data", dest="val_data", help="validation dataset (default: --data val split)")
    p.add_argument("--out", required=True)
    _add_train_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", help="JSON report path")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test",
                   help="manifest split to score (datasets without a manifest use all)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--pred-out", dest="pred_out", help="directory for predicted masks")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="one-at-a-time hyperparameter grid")
    p.add_argument("--config", help="JSON file with base training config")
    p.add_argument("--data", required=True, help="source dataset with train/val splits")
    p.add_argument("--target", required=True, help="target dataset (all samples scored)")
    p.add_argument("--out", required=True)
    _add_train_overrides(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("gradcheck", help="verify every backward pass by finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=_positive_float, default=1e-5)
    p.add_argument("--rel-tol", dest="rel_tol", type=_positive_float, default=1e-3)
    p.add_argument("--no-network", dest="no_network", action="store_true",
                   help="skip the end-to-end network cases")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"supw: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"supw: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"supw: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
