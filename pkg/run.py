#!/usr/bin/env python3
"""
Simulator command line: run experiment configs, verify invariants, fit slopes.

    python run.py run assets/rl_fixed_hard.json --jobs 4 --override seeds.count=10
    python run.py verify
    python run.py slope runs/regret-trend/results.csv final_regret --x K
"""

import argparse
import logging
import sys
from typing import List, Optional

from config import settings
from errors import ConfigError, InvariantViolation, SimulatorError, exit_code_for
from harness import run_experiment, slope_fit
from suites import run_suites

logger = logging.getLogger("simulate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simulate", description="Optimistic linear-MDP learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute an experiment config")
    run.add_argument("config")
    run.add_argument("--jobs", type=int, default=settings.jobs)
    run.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    verify = sub.add_parser("verify", help="run the invariant suites")
    verify.add_argument("--seed", type=int, default=None)

    slope = sub.add_parser("slope", help="log-log slope of a CSV column")
    slope.add_argument("csv")
    slope.add_argument("column")
    slope.add_argument("--x", default=None, help="x column (default: K, else episode)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, settings.log_level.upper(), logging.INFO),
                        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")

    try:
        if args.command == "run":
            print(f"Starting experiment {args.config}")
            print(f"Output root: {settings.output_dir}, jobs: {args.jobs}")
            print("=" * 50)
            return run_experiment(args.config, jobs=args.jobs, overrides=args.override)

        if args.command == "verify":
            seed = args.seed if args.seed is not None else (settings.seed or 0)
            report = run_suites(seed)
            for result in report.results:
                status = "ok" if result.ok else "FAIL"
                print(f"{result.name:<30} {result.passed:>6}/{result.total:<6} {status} {result.detail}")
            if not report.ok:
                raise InvariantViolation(", ".join(r.name for r in report.results if not r.ok))
            return 0

        fit = slope_fit(args.csv, args.column, args.x)
        print(f"slope={fit.slope:.6f} intercept={fit.intercept:.6f} residual={fit.residual:.6f} n={fit.n_points}")
        return 0
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return exit_code_for(exc)
    except (InvariantViolation, SimulatorError) as exc:
        logger.error("%s", exc)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
