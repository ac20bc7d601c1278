"""Command line entry point.

    facebias validate --config exp.yaml
    facebias run      --config exp.yaml [--seed N] [--out DIR] [--stage NAME]
    facebias ingest | augment | train | evaluate | report --config exp.yaml

``ingest`` covers both the ingest and preprocess stages. Exit status is 0
on success, 2 for an invalid config and 1 when a stage fails.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigError, StageFailure
from .pipeline import STAGES, run_pipeline

SUBCOMMAND_STAGES = {
    "run": STAGES,
    "ingest": ("ingest", "preprocess"),
    "augment": ("augment",),
    "train": ("train",),
    "evaluate": ("evaluate",),
    "report": ("report",),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facebias", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("validate", *SUBCOMMAND_STAGES):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment YAML file")
        p.add_argument("--seed", type=int, default=None, help="override the config's global seed")
        p.add_argument("--out", default=None, help="override the config's output directory")
        if name == "run":
            p.add_argument("--stage", choices=STAGES, action="append",
                           help="run only this stage (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    # the run log file always gets INFO; the console only what was asked for
    for handler in logging.getLogger().handlers:
        handler.setLevel(level)
    try:
        config = load_config(args.config, seed=args.seed, out=args.out)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    if args.command == "validate":
        print("ok")
        return 0
    stages = SUBCOMMAND_STAGES[args.command]
    if args.command == "run" and args.stage:
        stages = tuple(s for s in STAGES if s in args.stage)
    try:
        out = run_pipeline(config, stages)
    except StageFailure as exc:
        print(f"error: stage {exc.stage!r} failed: {exc.cause!r}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
