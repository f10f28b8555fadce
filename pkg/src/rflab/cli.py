"""Command-line entry: ``rflab <experiment> [-c config.ini] [--set section.key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import EXPERIMENTS, ConfigError, load_config
from .net import DivergenceError
from .sampler import BlowUpError

EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def build_parser():
    p = argparse.ArgumentParser(prog="rflab", description="Rectified-flow distillation experiments on 2D toy data.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("-c", "--config", help="INI file; missing keys take their defaults")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    # imported late so `--help` stays fast
    from .experiments import run_experiment

    try:
        cfg = load_config(args.config, overrides=[*args.overrides, f"run.experiment={args.experiment}"])
        out, summary = run_experiment(cfg)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, BlowUpError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(json.dumps({"run_dir": str(out), **summary}, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
