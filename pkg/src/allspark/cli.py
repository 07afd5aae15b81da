"""Command-line entry point: gen-data, train, eval, gradcheck, inspect-memory.

Exit codes: 0 success, 2 configuration/input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .config import SCHEMA, RunConfig, load_run_config, parse_config_text
from .data_io import (
    entry_text,
    generate_dataset,
    load_checkpoint,
    read_split,
    save_checkpoint,
    save_tensor,
    split_dataset,
    text_entry,
    write_dataset,
)
from .errors import AllSparkError, ConfigError, NumericError
from .gradcheck import format_table, parse_dims, run_checks
from .memory import SemanticMemory
from .model import SegModel
from .training import evaluate, fit

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
log = logging.getLogger("allspark")


# ---------------------------------------------------------------- checkpoints


def checkpoint_entries(config: RunConfig, model: SegModel, memory: SemanticMemory | None) -> dict:
    entries = {"config": text_entry(config.to_text())}
    for name, arr in model.state_dict().items():
        entries[f"param.{name}"] = np.asarray(arr, dtype=np.float32)
    if memory is not None:
        entries.update(memory_entries(memory))
    return entries


def memory_entries(memory: SemanticMemory) -> dict:
    out = {
        "memory.meta": np.array([memory.num_classes, memory.capacity, memory.token_length, memory.warmup_threshold], dtype=np.int32),
        "memory.inserted": memory.inserted.astype(np.int32),
    }
    for k in range(memory.num_classes):
        if memory.slots[k]:
            out[f"memory.slot.{k}"] = memory.slot_array(k).astype(np.float32)
    return out


def memory_from_entries(entries: dict) -> SemanticMemory:
    if "memory.meta" not in entries:
        raise ConfigError("checkpoint carries no memory dump")
    K, cap, d, warm = (int(v) for v in entries["memory.meta"])
    mem = SemanticMemory(K, cap, d, warmup_threshold=warm)
    for k in range(K):
        slot = entries.get(f"memory.slot.{k}")
        if slot is not None:
            mem.enqueue(k, slot)
    mem.inserted = entries["memory.inserted"].astype(np.int64)
    return mem


def model_from_checkpoint(path) -> tuple[RunConfig, SegModel, dict]:
    entries = load_checkpoint(path)
    if "config" not in entries:
        raise ConfigError(f"{path}: checkpoint has no config entry")
    cfg = RunConfig.from_values(parse_config_text(entry_text(entries["config"])))
    model = SegModel(cfg.model)
    model.load_state_dict({k[len("param."):]: v for k, v in entries.items() if k.startswith("param.")})
    return cfg, model, entries


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    if args.classes < 2:
        raise ConfigError("--classes must be at least 2 (class 0 is background)")
    if args.n < 2:
        raise ConfigError("--n must be at least 2")
    samples = generate_dataset(args.n, args.height, args.width, args.classes, args.seed, cast=args.cast)
    n_val = int(round(args.val_fraction * args.n))
    val, train = samples[:n_val], samples[n_val:]
    manifest = split_dataset(train, args.ratio, args.seed)
    write_dataset(args.out, train, manifest, val)
    print(f"wrote {len(samples)} samples to {args.out}: {len(manifest.labeled)} labeled, "
          f"{len(manifest.unlabeled)} unlabeled, {len(val)} val")
    return EXIT_OK


def _overrides(args) -> dict:
    return {k: getattr(args, k) for k in SCHEMA if getattr(args, k, None) is not None}


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    if not cfg.data or not Path(cfg.data).is_dir():
        raise ConfigError(f"data directory {cfg.data!r} not found")
    if not cfg.out:
        raise ConfigError("--out is required")
    T.set_precision(cfg.train.dtype)
    labeled = read_split(cfg.data, "labeled")
    unlabeled = read_split(cfg.data, "unlabeled")
    val = read_split(cfg.data, "val") or labeled
    if not labeled:
        raise ConfigError("dataset has no labeled samples")
    model = SegModel(cfg.model)
    result = fit(model, labeled, unlabeled, cfg.train, val)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(result.csv_text, encoding="utf-8")
    save_checkpoint(out / "checkpoint.asck", checkpoint_entries(cfg, model, result.memory))
    print(f"final mIoU {result.metrics.miou:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, model, _ = model_from_checkpoint(args.checkpoint)
    if not Path(args.data).is_dir():
        raise ConfigError(f"data directory {args.data!r} not found")
    T.set_precision(cfg.train.dtype)
    model.cast()
    samples = read_split(args.data, args.split)
    report = evaluate(model, samples, cfg.train.ignore_index)
    print(f"mIoU {report.miou:.4f}")
    for k, v in enumerate(report.per_class):
        print(f"class {k}: {'n/a' if np.isnan(v) else f'{v:.4f}'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.dtype != "f64":
        raise ConfigError("gradcheck runs in f64 only; finite differences are meaningless at f32")
    dims = parse_dims(args.dims)
    with T.precision("f64"):
        results = run_checks(dims=dims, seed=args.seed)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_inspect_memory(args) -> int:
    entries = load_checkpoint(args.checkpoint)
    mem = memory_from_entries(entries)
    occ = mem.occupancy()
    print("class  stored  capacity  inserted")
    for k, n in enumerate(occ):
        print(f"{k:5d}  {n:6d}  {mem.capacity:8d}  {int(mem.inserted[k]):8d}")
    print(f"total  {sum(occ):6d}")
    if args.export:
        out = Path(args.export)
        out.mkdir(parents=True, exist_ok=True)
        for k in range(mem.num_classes):
            if mem.slots[k]:
                save_tensor(out / f"slot_{k}.astf", mem.slot_array(k).astype(np.float32))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_schema_flags(p: argparse.ArgumentParser) -> None:
    for key, (typ, default) in SCHEMA.items():
        flag = "--" + key.replace("_", "-")
        p.add_argument(flag, dest=key, default=None, metavar=typ.__name__.upper(),
                       help=f"(default: {default!r})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="allspark", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset + split manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratio", default="1/16", help="labeled fraction of the training set")
    p.add_argument("--val-fraction", type=float, default=0.125)
    p.add_argument("--cast", type=float, default=0.0, help="per-image colour shift strength in [0, 1)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and write checkpoint.asck + metrics.csv")
    p.add_argument("--config", default=None, help="key=value config file")
    _add_schema_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", choices=["val", "labeled", "unlabeled", "train"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--dims", default="", help="e.g. H=8,W=8,patch=4,C=4,K=3")
    p.add_argument("--dtype", default="f64")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect-memory", help="print semantic-memory occupancy from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--export", default=None, help="directory for per-class ASTF slot dumps")
    p.set_defaults(func=cmd_inspect_memory)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        threads = int(os.environ.get("ALLSPARK_THREADS", "1"))
    except ValueError:
        print("error: ALLSPARK_THREADS must be an integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=max(1, threads)):
            return args.func(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AllSparkError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        T.set_precision("f32")


if __name__ == "__main__":
    sys.exit(main())
