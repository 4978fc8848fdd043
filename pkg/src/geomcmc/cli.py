"""Command-line entry point: run pipeline stages against a config file."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .pipeline import STAGES, load_config, run_stage


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="geomcmc",
        description="Surrogate-accelerated geometric MCMC experiment pipeline.")
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON experiment config (defaults merged in)")
    parser.add_argument("--stage", default="all", choices=STAGES + ("all",),
                        help="pipeline stage to run")
    parser.add_argument("--out", type=Path, default=Path("runs/default"),
                        help="artifact directory")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for sample generation stages")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)

    cfg = load_config(args.config)
    args.out.mkdir(parents=True, exist_ok=True)
    run_stage(args.stage, cfg, args.out, threads=args.threads)
    return 0


if __name__ == "__main__":
    sys.exit(main())
