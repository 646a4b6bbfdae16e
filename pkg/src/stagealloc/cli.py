"""Command-line entry point.

    stagealloc gen-data   --config exp.yaml [--force]
    stagealloc bench-cost --config exp.yaml [--force]
    stagealloc train      --config exp.yaml [--method M ...] [--seed S ...] [--resume]
    stagealloc evaluate   --config exp.yaml
    stagealloc allocate   --config exp.yaml
    stagealloc control    --config exp.yaml [--no-sweep]
    stagealloc report     --config exp.yaml

Failures exit nonzero with a single JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from stagealloc import pipeline
from stagealloc.config import ConfigError, build_config, load_config, parse_method

EXIT_USAGE, EXIT_CONFIG, EXIT_STAGE, EXIT_INTERNAL = 2, 3, 4, 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("usage", message, EXIT_USAGE, usage=self.format_usage().strip())


def _fail(kind, message, code, **details):
    sys.stderr.write(json.dumps({"error": kind, "message": message, **details}, sort_keys=True) + "\n")
    raise SystemExit(code)


def _method(tag):
    try:
        parse_method(tag)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return tag


def build_parser():
    p = _Parser(prog="stagealloc", description="Stage-wise computation allocation experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="YAML experiment config (defaults to the desk profile)")
        s.add_argument("--profile", choices=["desk", "paper-faithful"],
                       help="built-in profile when no config file is given")
        return s

    for name, help_ in (("gen-data", "build the logged dataset"), ("bench-cost", "run the cost test bench")):
        cmd(name, help_).add_argument("--force", action="store_true", help="overwrite existing outputs")
    t = cmd("train", "train methods offline")
    t.add_argument("--method", action="append", type=_method, help="method tag (repeatable)")
    t.add_argument("--seed", action="append", type=int, help="seed (repeatable)")
    t.add_argument("--resume", action="store_true", help="continue from existing checkpoints")
    t.add_argument("--stop-at", type=int, help=argparse.SUPPRESS)
    t.add_argument("--workers", type=int, default=1)
    for name, help_ in (("evaluate", "revenue simulation of trained methods"),
                        ("allocate", "write quota-feasible allocation plans")):
        s = cmd(name, help_)
        s.add_argument("--method", action="append", type=_method)
        s.add_argument("--seed", action="append", type=int)
    c = cmd("control", "closed-loop load control")
    c.add_argument("--seed", action="append", type=int)
    c.add_argument("--no-sweep", action="store_true", help="skip the alpha/beta/N sweep")
    cmd("report", "consolidate tables")
    return p


def _config(args):
    if args.config:
        return load_config(args.config)
    return build_config({"profile": args.profile} if args.profile else {})


def run(args):
    cfg = _config(args)
    c = args.command
    if c == "gen-data":
        return pipeline.gen_data(cfg, args.force)["dataset_hash"]
    if c == "bench-cost":
        pipeline.bench_cost(cfg, args.force)
        return str(pipeline.Paths(cfg.output_dir).cost_model)
    if c == "train":
        return pipeline.train(cfg, args.method, args.seed, args.resume, args.stop_at, args.workers)
    if c == "evaluate":
        return pipeline.evaluate(cfg, args.method, args.seed)["summary"]
    if c == "allocate":
        return pipeline.allocate(cfg, args.method, args.seed)
    if c == "control":
        return pipeline.control(cfg, args.seed, not args.no_sweep)["summary"]
    return pipeline.report(cfg)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        out = run(args)
    except ConfigError as exc:
        _fail("config", str(exc), EXIT_CONFIG)
    except pipeline.StageError as exc:
        _fail(exc.kind, str(exc), EXIT_STAGE, **exc.details)
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        _fail("internal", f"{type(exc).__name__}: {exc}", EXIT_INTERNAL)
    sys.stdout.write(json.dumps(out, sort_keys=True, default=str) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
