"""Command-line entry point.

Exit codes: 0 success, 1 gradient check failed, 2 config error, 3 data error,
4 numeric abort, 5 checkpoint/config mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from . import checkpoint
from .config import format_config, load_config
from .data import (evaluate, normalize_clip, read_clip, read_manifest, stratified_split, synth_dataset,
                   write_manifest)
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .model import param_shapes, predict, shape_ledger
from .training import gradcheck, toy_config, train

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 1, 2, 3, 4, 5


def _seed(args, default: int) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("ENGAGEFORMER_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"ENGAGEFORMER_SEED={env!r} is not an integer") from None
    return default


def _load_params(path, model_cfg):
    try:
        params = checkpoint.load(path)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    checkpoint.check_layout(params, param_shapes(model_cfg))
    return params


def cmd_train(args) -> int:
    model_cfg, train_cfg = load_config(args.config)
    overrides = {"seed": _seed(args, train_cfg.seed)}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    train_cfg = dataclasses.replace(train_cfg, **overrides)
    if args.print_config:
        sys.stdout.write(format_config(model_cfg, train_cfg))
        return EXIT_OK
    if args.data is None or args.out is None:
        raise ConfigError("train needs --data and --out")
    ledger = shape_ledger(model_cfg)
    print(f"params={ledger.param_count} tokens={ledger.token_counts}", flush=True)
    train(model_cfg, train_cfg, Path(args.data), args.out, threads=args.threads, log=lambda s: print(s, flush=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    model_cfg, _ = load_config(args.config)
    params = _load_params(args.checkpoint, model_cfg)
    report = evaluate(model_cfg, params, read_manifest(args.data))
    sys.stdout.write(report.format())
    return EXIT_OK


def cmd_predict(args) -> int:
    model_cfg, _ = load_config(args.config)
    params = _load_params(args.checkpoint, model_cfg)
    try:
        clip = read_clip(args.clip)
    except OSError as exc:
        raise DataError(f"cannot read clip {args.clip}: {exc.strerror}") from None
    if clip.shape != model_cfg.clip_shape:
        raise DataError(f"{args.clip}: clip shape {clip.shape} does not match configured {model_cfg.clip_shape}")
    idx, probs = predict(normalize_clip(clip), model_cfg, params)
    print(model_cfg.labels[idx], " ".join(f"{p:.8f}" for p in probs))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    model_cfg = load_config(args.toy_config)[0] if args.toy_config else toy_config()
    report = gradcheck(model_cfg, _seed(args, 0), max_entries=args.max_entries)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def cmd_synth(args) -> int:
    try:
        geometry = tuple(int(x) for x in args.geometry.lower().split("x"))
    except ValueError:
        geometry = ()
    if len(geometry) != 4 or min(geometry) < 1:
        raise ConfigError(f"--geometry must be TxHxWxD, got {args.geometry!r}")
    path = synth_dataset(args.n, args.classes, geometry, _seed(args, 0), args.out)
    print(path)
    return EXIT_OK


def cmd_split(args) -> int:
    manifest = read_manifest(args.data)
    train_m, test_m = stratified_split(manifest, args.ratio, _seed(args, 0))
    out = Path(args.data).parent
    write_manifest(out / f"{args.prefix}train.txt", train_m)
    write_manifest(out / f"{args.prefix}test.txt", test_m)
    print(f"train={len(train_m.entries)} test={len(test_m.entries)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="engageformer", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="confusion matrix and metrics on a manifest")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one clip file")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    p.add_argument("--toy-config")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-entries", type=int, help="probe at most this many entries per tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic labelled clip set")
    p.add_argument("--n", type=int, required=True, help="clips per class")
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--geometry", default="32x112x112x3", help="TxHxWxD")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="stratified train/test split of a manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--seed", type=int)
    p.add_argument("--prefix", default="")
    p.set_defaults(func=cmd_split)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
