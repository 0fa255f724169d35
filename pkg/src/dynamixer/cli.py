"""Command-line entry point.

Exit codes: 0 success, 2 config/schema or bad arguments, 3 capability,
4 data (missing or malformed datasets, checkpoints, inputs), 5 numeric abort.
Errors go to stderr; stdout only carries results.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from dynamixer.config import PRESETS, DataConfig, RunConfig, load_config, preset
from dynamixer.errors import CheckpointError, ConfigError, ContractError, DataFormatError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_CAPABILITY, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5
GRADCHECK_TOL = 1e-4


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _err(msg):
    print(f"dynamixer: {msg}", file=sys.stderr)


def _run_config(args, default=None) -> RunConfig:
    if getattr(args, "config", None):
        try:
            return load_config(args.config)
        except OSError as err:
            raise CliError(EXIT_CONFIG, f"cannot read config {args.config}: {err.strerror}") from None
    name = getattr(args, "preset", None) or default
    if name is None:
        raise CliError(EXIT_CONFIG, "one of --config or --preset is required")
    return preset(name).validate()


def _with_data_overrides(run, args):
    data = run.data
    changes = {}
    if getattr(args, "data", None):
        changes["kind"] = args.data
    if getattr(args, "data_dir", None):
        changes["dir"] = args.data_dir
    if changes:
        data = dataclasses.replace(data, **changes).validate()
    return dataclasses.replace(run, data=data)


def _workers(args):
    if args.deterministic:
        return 0
    cap = os.environ.get("DYNAMIXER_THREADS")
    workers = args.workers
    if cap:
        try:
            workers = min(workers, max(int(cap), 0))
        except ValueError:
            raise CliError(EXIT_CONFIG, f"DYNAMIXER_THREADS must be an integer, got {cap!r}") from None
    return workers


def _load_data(run, dtype=None):
    from dynamixer.data import load_datasets
    from dynamixer.tensor import get_default_dtype

    try:
        return load_datasets(run.data, run.model, dtype or get_default_dtype())
    except ValueError as err:  # synthetic corpus does not fit the model
        raise CliError(EXIT_CONFIG, str(err)) from None


# -- subcommands --------------------------------------------------------------


def cmd_analyze(args):
    from dynamixer.analysis import capacity

    report = capacity(_run_config(args).model)
    sys.stdout.write(report.to_json() + "\n" if args.format == "json" else report.to_csv())
    return EXIT_OK


def cmd_gradcheck(args):
    from dynamixer.gradcheck import end_to_end_check
    from dynamixer.tensor import is_64bit

    if not is_64bit():
        raise CliError(EXIT_CAPABILITY, "gradcheck requires 64-bit mode")
    if args.eps <= 0:
        raise CliError(EXIT_CONFIG, "--eps must be positive")
    model = _run_config(args, "tiny").model
    result = end_to_end_check(model, seed=args.seed, eps=args.eps, n_samples=args.samples)
    print(f"max relative error: {result.max_rel_error:.6e} ({result.n_checked} coordinates, eps={args.eps:g})")
    if result.max_rel_error < GRADCHECK_TOL:
        return EXIT_OK
    hint = ""
    if args.eps < 1e-8:
        hint = "; eps is below the finite-difference noise floor, rounding error dominates the difference quotient"
    raise CliError(EXIT_NUMERIC, f"gradcheck failed: {result.max_rel_error:.3e} >= {GRADCHECK_TOL:g}{hint}")


def cmd_train(args):
    from dynamixer.train import NumericAbort, train

    run = _with_data_overrides(_run_config(args), args)
    train_cfg = run.train
    if args.epochs is not None:
        train_cfg = dataclasses.replace(train_cfg, epochs=args.epochs)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    train_cfg.validate()
    train_ds, val_ds = _load_data(run)
    os.makedirs(args.out, exist_ok=True)
    log = None if args.quiet else (lambda line: print(line, file=sys.stderr))
    try:
        result = train(run.model, train_cfg, train_ds, val_ds, out_dir=args.out, augment=run.data.use_augment,
                       workers=_workers(args), log=log)
    except NumericAbort as err:
        where = err.checkpoint or "none saved yet"
        raise CliError(EXIT_NUMERIC, f"{err}; last checkpoint: {where}") from None
    print(f"steps: {len(result.metrics)}")
    print(f"train_top1: {result.final_train_top1:.4f}")
    print(f"val_top1: {result.final_val_top1:.4f}")
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args):
    from dynamixer.checkpoint import load_checkpoint
    from dynamixer.train import evaluate

    ckpt = load_checkpoint(args.checkpoint)
    if args.config or args.preset:
        run = _run_config(args)
        run = dataclasses.replace(run, model=ckpt.config)
    else:
        run = RunConfig(ckpt.config, data=DataConfig())
    run = _with_data_overrides(run, args)
    train_ds, val_ds = _load_data(run, dtype=ckpt.weights.head.weight.dtype)
    dataset = val_ds if args.split == "val" else train_ds
    print(f"{args.split}_top1: {evaluate(ckpt, dataset)!r}")
    return EXIT_OK


def cmd_bench(args):
    from dynamixer import kernels
    from dynamixer.analysis import bench_throughput

    if args.backend:
        kernels.set_backend(args.backend)
    model = _run_config(args).model
    dtype = np.float64 if args.float == 64 else np.float32
    result = bench_throughput(model, args.batch, args.duration, args.windows, dtype=dtype)
    print(f"images/s: {result.mean:.2f} +- {result.std:.2f} (batch {result.batch_size}, "
          f"{len(result.windows)} windows, kernels={result.backend})")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bench.json"), "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(result), fh, indent=2)
    return EXIT_OK


def cmd_export_mixing(args):
    from dynamixer.checkpoint import load_checkpoint
    from dynamixer.mixer import model_forward

    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    try:
        image = np.load(args.input, allow_pickle=False)
    except (OSError, ValueError) as err:
        raise CliError(EXIT_DATA, f"cannot read input {args.input}: {err}") from None
    if image.ndim == 3:
        image = image[None]
    expected = (1, cfg.in_chans, cfg.image_size, cfg.image_size)
    if image.shape != expected:
        raise CliError(EXIT_DATA, f"input must have shape {expected[1:]} or {expected}, got {image.shape}")

    layers = [(stage, layer) for stage in ckpt.weights.stages for layer in stage.layers]
    if not 0 <= args.layer < len(layers):
        raise CliError(EXIT_CONFIG, f"--layer {args.layer} out of range [0, {len(layers)})")
    block = layers[args.layer][1].block
    op = block.row_op if args.direction == "row" else block.col_op
    if op is None:
        raise CliError(EXIT_CONFIG, f"layer {args.layer} has {args.direction} mixing disabled")
    if not 0 <= args.segment < op.segments:
        raise CliError(EXIT_CONFIG, f"--segment {args.segment} out of range [0, {op.segments})")
    if not 0 <= args.index < op.num_tokens:
        raise CliError(EXIT_CONFIG, f"--index {args.index} out of range [0, {op.num_tokens})")

    capture = {}
    model_forward(image.astype(ckpt.weights.head.weight.dtype), ckpt.weights, cfg, capture=capture)
    p = np.asarray(capture[(args.layer, args.direction)][0, args.index, args.segment], dtype=np.float64)
    lines = "".join(",".join(repr(float(v)) for v in row) + "\n" for row in p)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(lines)
    else:
        sys.stdout.write(lines)
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _add_config(p, required=True):
    group = p.add_mutually_exclusive_group(required=required)
    group.add_argument("--config", help="JSON config document (model/train/data)")
    group.add_argument("--preset", choices=PRESETS, help="built-in configuration")


def build_parser():
    parser = argparse.ArgumentParser(prog="dynamixer", description="DynaMixer vision MLP tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="parameter and MAC counts")
    _add_config(p)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="end-to-end finite-difference gradient check (64-bit)")
    _add_config(p, required=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--samples", type=int, default=1000, help="coordinates to check")
    p.set_defaults(func=cmd_gradcheck)

    data_flags = argparse.ArgumentParser(add_help=False)
    data_flags.add_argument("--data", choices=("synthetic", "cifar10"), help="override data.kind")
    data_flags.add_argument("--data-dir", help="CIFAR-10 binary batch directory")

    p = sub.add_parser("train", parents=[data_flags], help="train from scratch")
    _add_config(p)
    p.add_argument("--out", required=True, help="output directory for metrics and checkpoints")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=2, help="batch-assembly threads (capped by DYNAMIXER_THREADS)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded batch assembly")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[data_flags], help="top-1 accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_config(p, required=False)
    p.add_argument("--split", choices=("val", "train"), default="val")
    p.add_argument("--deterministic", action="store_true", help="accepted for symmetry; eval is single-threaded")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="eval-mode throughput")
    _add_config(p)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--duration", type=float, default=5.0, help="seconds, split over the windows")
    p.add_argument("--windows", type=int, default=5)
    p.add_argument("--float", type=int, choices=(32, 64), default=32)
    p.add_argument("--backend", choices=("python", "cython"))
    p.add_argument("--out", help="directory for bench.json")
    p.add_argument("--deterministic", action="store_true", help="accepted for symmetry")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-mixing", help="write one mixing matrix as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help=".npy image, (C, H, W) or (1, C, H, W), already normalized")
    p.add_argument("--layer", type=int, required=True, help="global layer index")
    p.add_argument("--direction", choices=("row", "col"), required=True)
    p.add_argument("--segment", type=int, default=0)
    p.add_argument("--index", type=int, default=0, help="which grid row (or column) to export")
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    p.set_defaults(func=cmd_export_mixing)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage to stderr
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except CliError as err:
        _err(str(err))
        return err.code
    except ConfigError as err:
        _err(f"config error: {err}")
        return EXIT_CONFIG
    except ContractError as err:
        _err(str(err))
        return EXIT_CAPABILITY
    except (CheckpointError, DataFormatError, FileNotFoundError) as err:
        _err(f"data error: {err}")
        return EXIT_DATA
    except NumericError as err:
        _err(f"numeric error: {err}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
