"""Command-line interface for the twin-experiment harness.

Subcommands:

* ``run`` -- run an experiment described by a JSON config (fields of
  :class:`~varenkf.harness.ExperimentConfig`; flags override file values)
  and write records.csv / summary.csv / per_dim_bias.csv.
* ``list-filters`` -- print the available filter names.
* ``gd-trace`` -- dump the (iteration, best_value) convergence trace of the
  KL minimization at one time step.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .harness import FILTER_NAMES, ExperimentConfig, gd_convergence_trace, run_experiment


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varenkf")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a twin experiment")
    run_p.add_argument("--config", required=True, help="JSON experiment config")
    run_p.add_argument(
        "--filter",
        action="append",
        dest="filters",
        choices=FILTER_NAMES,
        help="filter to run (repeatable; overrides the config list)",
    )
    run_p.add_argument("--theta", type=float)
    run_p.add_argument("--ensemble-size", type=int, dest="ensemble_size")
    run_p.add_argument("--trials", type=int)
    run_p.add_argument("--time-steps", type=int, dest="time_steps")
    run_p.add_argument("--seed", type=int)
    run_p.add_argument("--out", default="out", help="output directory")
    run_p.add_argument("--workers", type=int, default=1)

    sub.add_parser("list-filters", help="list available filter names")

    trace_p = sub.add_parser("gd-trace", help="dump a KL-minimization convergence trace")
    trace_p.add_argument("--config", required=True)
    trace_p.add_argument("--step", type=int, required=True, help="time step (1-based)")
    trace_p.add_argument("--out", default="-", help="output CSV path, '-' for stdout")
    return parser


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {
        key: getattr(args, key, None)
        for key in ("theta", "ensemble_size", "trials", "time_steps", "seed")
    }
    filters = getattr(args, "filters", None)
    if filters:
        overrides["filters"] = tuple(filters)
    return ExperimentConfig.from_json(args.config, **overrides)


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)

    if args.command == "list-filters":
        for name in FILTER_NAMES:
            print(name)
        return 0

    try:
        config = _load_config(args)
    except (OSError, ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    if args.command == "run":
        _, code = run_experiment(config, Path(args.out), workers=args.workers)
        return code

    if args.command == "gd-trace":
        trace = gd_convergence_trace(config, args.step)
        rows = trace.csv_rows()
        out = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
        try:
            writer = csv.writer(out)
            writer.writerow(["iteration", "best_value"])
            writer.writerows(rows)
        finally:
            if out is not sys.stdout:
                out.close()
        return 0

    return 1


if __name__ == "__main__":
    raise SystemExit(main())
