"""Command line: ``sharpcl run | reference | stream | check``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import PRESETS, RunConfig, dump_config, load_config, preset
from .data import load_dataset, subset_per_class
from .driver import (
    build_stream,
    checkpoint_report,
    load_checkpoint,
    run_reference,
    run_sharp,
    save_checkpoint,
    write_outputs,
)

_SKIP_FLAGS = {"optimizer", "episodes", "pretrain_classes", "input_shape"}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file (may contain a 'preset' key)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="dataset preset (default: --dataset)")
    p.add_argument("--data-root", help="directory holding <dataset>/ files (or $SHARP_DATA_ROOT)")
    for f in dataclasses.fields(RunConfig):
        if f.name in _SKIP_FLAGS:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool",):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            conv = {"int": int, "float": float, "str": str, "int | None": int, "str | None": str}[f.type]
            p.add_argument(flag, dest=f.name, type=conv, default=None)
    p.add_argument("--episodes", type=json.loads, default=None, help='JSON list, e.g. "[[0,1],[2,3]]"')
    p.add_argument("--optimizer", default=None, choices=["adadelta", "sgd_momentum", "sgd"])
    p.add_argument("--lr", type=float, default=None)


def config_from_args(args) -> RunConfig:
    overrides = {}
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None and f.name != "optimizer":
            overrides[f.name] = v
    if args.config:
        cfg = load_config(args.config)
        cfg = cfg.replace(**overrides) if overrides else cfg
    else:
        name = args.preset or overrides.get("dataset", "mnist")
        cfg = preset(name, **overrides) if name in PRESETS else RunConfig(**overrides)
    if args.optimizer or args.lr is not None:
        opt = dataclasses.replace(cfg.optimizer, **{k: v for k, v in
                                                    (("kind", args.optimizer), ("lr", args.lr)) if v is not None})
        cfg = cfg.replace(optimizer=opt)
    cfg.validate()
    return cfg


def _load_data(cfg: RunConfig, root):
    train = load_dataset(cfg.dataset, "train", root)
    test = load_dataset(cfg.dataset, "test", root)
    if cfg.subset:
        train = subset_per_class(train, cfg.subset, np.random.default_rng(cfg.seed))
    return train, test


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    train, test = _load_data(cfg, args.data_root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    learner, metrics = run_sharp(cfg, train, test)
    write_outputs(out, cfg, metrics, {"shortfalls": learner.shortfall_log})
    save_checkpoint(learner, out / "checkpoint.npz")
    print(json.dumps({"final_accuracy": metrics.final("accuracy"),
                      "final_rank0_fraction": metrics.final("rank0_fraction")}))
    return 0


def cmd_reference(args) -> int:
    cfg = config_from_args(args)
    train, test = _load_data(cfg, args.data_root)
    out = Path(args.out)
    metrics = run_reference(cfg, args.mode, train, test)
    write_outputs(out, cfg, metrics, {"mode": args.mode})
    dump_config(cfg, out / "config.yaml")
    print(json.dumps({"mode": args.mode, "final_accuracy": metrics.final("accuracy")}))
    return 0


def cmd_stream(args) -> int:
    schedule = build_stream(args.num_classes, args.mode, args.classes_per_episode, args.eta, args.seed,
                            args.max_episodes)
    for e, classes in enumerate(schedule):
        print(f"{e}\t{' '.join(map(str, classes))}")
    return 0


def cmd_check(args) -> int:
    learner = load_checkpoint(args.checkpoint)
    report = checkpoint_report(learner)
    for name, ok in report.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return 0 if all(report.values()) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sharpcl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train SHARP over an episode stream")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("reference", help="dense joint / sequential SGD baselines")
    _add_config_flags(p)
    p.add_argument("--mode", choices=["joint", "sgd_sequential"], required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reference)

    p = sub.add_parser("stream", help="print the episode class schedule")
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--mode", choices=["strict", "blurry"], default="strict")
    p.add_argument("--classes-per-episode", type=int, default=2)
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-episodes", type=int, default=50)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("check", help="verify structural invariants of a checkpoint")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
