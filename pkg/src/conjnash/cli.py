"""Command line entry point.

Every pipeline subcommand works on a run directory and runs (or resumes)
one cell up to its stage; earlier stages are reused from their checkpoints.
"""
import argparse
import logging
import os
import sys

from .errors import ConjnashError
from .harness import (CONDITIONS, ExperimentConfig, _measure_header, run_cell,
                      run_experiment, validate_condition_table, write_csv)

STAGE_COMMANDS = {
    "gen-prefs": "prefs",
    "gen-design": "design",
    "simulate": "responses",
    "estimate": "estimate",
    "diagnose": "diagnose",
    "precompute": "precompute",
    "play": "play",
    "analyze": "analyze",
}


def _config(args):
    over = {"seed": args.seed, "condition": args.condition,
            "max_scenarios": getattr(args, "max_scenarios", None)}
    if args.config:
        return ExperimentConfig.load(args.config, **over)
    return ExperimentConfig().override(**over)


def _common(p):
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--condition", type=int, help="base condition row (1-16)")
    p.add_argument("--workers", type=int, help="worker threads (default CONJNASH_WORKERS or all cores)")
    p.add_argument("--backend", choices=("cython", "python"))


def build_parser():
    ap = argparse.ArgumentParser(prog="conjnash")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)
    for cmd, stage in STAGE_COMMANDS.items():
        p = sub.add_parser(cmd, help=f"run a cell through the {stage} stage")
        _common(p)
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--replication", type=int, default=0)
        if cmd == "precompute":
            p.add_argument("--max-scenarios", type=int)
    p = sub.add_parser("run", help="full pipeline for every replication")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--max-scenarios", type=int)
    p = sub.add_parser("validate", help="scenario counts of the base conditions")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--condition", type=int)
    return ap


def _validate(args):
    if args.config or args.condition:
        reports = [validate_condition_table(_config(args))]
    else:
        reports = [validate_condition_table(i + 1) for i in range(len(CONDITIONS))]
    for r in reports:
        tag = f"row {r.table_row:2d}" if r.table_row else "custom"
        print(f"{tag}  {r.line()}  {'ok' if r.matches else 'MISMATCH'}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.cmd == "validate":
            _validate(args)
            return 0
        cfg = _config(args)
        if args.cmd == "run":
            root = run_experiment(cfg, args.out, args.workers, args.backend)
            print(os.path.join(root, "measures.csv"))
            return 0
        stage = STAGE_COMMANDS[args.cmd]
        rows = run_cell(cfg, args.replication, args.out, args.workers, args.backend,
                        until=stage)
        if rows is not None:
            path = os.path.join(args.out, "measures.csv")
            write_csv(path, _measure_header(), rows[0])
            print(path)
        return 0
    except ConjnashError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
