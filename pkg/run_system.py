#!/usr/bin/env python3
"""
Experiment runner for the federated recommendation simulator

    python run_system.py generate-data --set DATA_PATH=data/synthetic
    python run_system.py train-privrec --config experiments/desk.env --out runs/a
    python run_system.py accountant --set ACCOUNTANT_N=760 --set ACCOUNTANT_M=1,2,3

Exit status: 0 on success, 2 for an invalid configuration, 1 for any other failure.
"""

import argparse
import logging
import sys

from config import Config, ConfigError, ExperimentConfig
from pipeline import COMMANDS, run_command


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description="Federated recommendation experiments")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="KEY=VALUE experiment file or a run manifest.json")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--out", help="artifact directory")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("--no-personalize", action="store_true", help="evaluate the global model as is")
    parser.add_argument("--inactive-below", type=int, metavar="K", help="only evaluate users with < K interactions")
    parser.add_argument("--quiet", action="store_true", help="hide progress bars")
    return parser.parse_args(argv)


def overrides_from(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["SEED"] = args.seed
    if args.threads is not None:
        overrides["THREADS"] = args.threads
    if args.out:
        overrides["OUT_DIR"] = args.out
    if args.no_personalize:
        overrides["PERSONALIZE"] = "false"
    if args.inactive_below is not None:
        overrides["INACTIVE_BELOW"] = args.inactive_below
    return overrides


def main(argv=None):
    logging.basicConfig(level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0

    print(f"🔁 privrec {args.command}")
    print("=" * 50)
    try:
        cfg = ExperimentConfig.from_sources(args.config, overrides_from(args))
        cfg.validate(needs_data=COMMANDS[args.command][1])
    except ConfigError as e:
        print(f"❌ Invalid configuration: {e}")
        logging.getLogger(__name__).error("invalid configuration: %s", e)
        return 2

    try:
        manifest = run_command(args.command, cfg, progress=not args.quiet)
    except Exception as e:
        print(f"❌ {args.command} failed: {e}")
        logging.getLogger(__name__).exception("%s failed", args.command)
        return 1

    print(f"\n✅ {args.command} finished; {len(manifest['artifacts'])} artifacts in {cfg.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
