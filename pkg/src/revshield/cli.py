"""Command line entry point.

    revshield train --env cartpole --shield savmpc --seed 0 [--config FILE] [--out DIR]
    revshield experiment --manifest FILE [--force] [--full]
    revshield aggregate --cell DIR --window W
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ENVS, SHIELDS, ConfigError, load_config
from .experiment import aggregate_cell, load_manifest, run_experiment, run_seed

log = logging.getLogger("revshield")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="revshield", description="Shielded PPO training and experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one (env, shield, seed) run")
    t.add_argument("--env", choices=ENVS, required=True)
    t.add_argument("--shield", choices=SHIELDS, required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--config", type=Path, help="config file with 'section.key = value' lines")
    t.add_argument("--out", type=Path, default=None, help="output directory (default runs/<env>/<shield>)")

    e = sub.add_parser("experiment", help="run every cell and seed of a manifest")
    e.add_argument("--manifest", type=Path, required=True)
    e.add_argument("--force", action="store_true", help="retrain seeds that already have results")
    e.add_argument("--full", action="store_true", help="10 seeds per cell where the manifest gives none")
    e.add_argument("--no-plots", action="store_true")

    a = sub.add_parser("aggregate", help="(re)build aggregate.csv for one cell directory")
    a.add_argument("--cell", type=Path, required=True)
    a.add_argument("--window", type=int, default=20)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            cfg = load_config(args.config, args.env, args.shield, args.seed)
            out = args.out or Path("runs") / args.env / args.shield
            print(run_seed(cfg, out))
        elif args.command == "experiment":
            manifest = load_manifest(args.manifest, full=args.full)
            print(run_experiment(manifest, force=args.force, plot=not args.no_plots))
        else:
            if args.window < 1:
                raise ConfigError("--window must be >= 1")
            print(aggregate_cell(args.cell, args.window))
    except (ConfigError, ValueError, OSError) as e:
        print(f"revshield: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
