"""Command line entry point: ``oudrisk <subcommand> --config <path> [options]``."""
from __future__ import annotations

import argparse
import logging
import os
import platform
import sys

import numpy as np
import scipy

from . import __version__
from .config import MODEL_KINDS, ConfigError, load_config
from .impute import METHODS
from .pipeline import STAGES, StageError, run_pipeline, run_stage

log = logging.getLogger("oudrisk")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def build_info() -> str:
    return (f"oudrisk {__version__} (python {platform.python_version()}, numpy {np.__version__}, "
            f"scipy {scipy.__version__}, {platform.system().lower()}-{platform.machine()})")


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline INI file")
    common.add_argument("--jobs", type=int, help="worker threads for parts and forest trees")
    common.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    common.add_argument("--impute", choices=METHODS, help="imputation method")
    common.add_argument("--model", choices=MODEL_KINDS, help="restrict to one model kind")
    common.add_argument("--force", action="store_true", help="rerun even if up to date")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="oudrisk", description="OUD risk prediction pipeline")
    parser.add_argument("--version", action="version", version=build_info())
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("pipeline",):
        sub.add_parser(name, parents=[common], help=f"run the {name} stage"
                       if name != "pipeline" else "run every stage in order")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, jobs=args.jobs, impute=args.impute,
                          model=args.model, out=os.environ.get("OUDRISK_OUT") or None)
    except ConfigError as exc:
        print(f"oudrisk: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "pipeline":
            manifests = run_pipeline(cfg, force=args.force)
        else:
            manifests = [run_stage(cfg, args.command, force=args.force)]
    except StageError as exc:
        print(f"oudrisk: {exc}", file=sys.stderr)
        return EXIT_FAILED
    for m in manifests:
        print(f"{m['stage']}: {len(m['outputs'])} outputs, {m['wall_time_s']}s")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
