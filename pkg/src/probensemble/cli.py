"""Command-line front end.

Subcommands: `run` executes a scenario (by shipped name or file path) and
writes artifacts plus figures, `replay-check` byte-compares two run
directories, `list-scenarios` names the shipped configurations.

Exit codes: 0 success, 2 configuration problem, 3 runtime failure,
4 replay mismatch.
"""

from __future__ import annotations

import argparse
import os
import pathlib
import sys

from .errors import ConfigError, ProbEnsembleError
from .reporting import fmt_float
from .runner import replay_check, run_scenario
from .scenario import load_scenario, resolve_scenario, shipped_scenarios

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_REPLAY = 4

OUT_ROOT_ENV = "PROBENSEMBLE_OUT_ROOT"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="probensemble",
        description="Probability-level ensemble simulator: run scenarios, "
                    "compare communication costs, verify deterministic replay.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a scenario and write artifacts")
    run_p.add_argument("scenario", help="shipped scenario name or path to a .scn file")
    run_p.add_argument("--out", metavar="DIR", default=None,
                       help="output directory (default: <out-root>/<scenario name>; "
                            f"out-root from ${OUT_ROOT_ENV} or ./runs)")
    run_p.add_argument("--mode", choices=("inproc", "tcp"), default=None,
                       help="transport override (default: the scenario's setting)")
    run_p.add_argument("--seed", type=int, default=None,
                       help="seed override (default: the scenario's seed)")

    replay_p = sub.add_parser("replay-check",
                              help="byte-compare the CSV artifacts of two runs")
    replay_p.add_argument("dir_a")
    replay_p.add_argument("dir_b")

    sub.add_parser("list-scenarios", help="name the scenario files shipped with the package")
    return parser


def _cmd_run(args) -> int:
    path = resolve_scenario(args.scenario)
    config = load_scenario(path)
    if args.out is not None:
        out_dir = pathlib.Path(args.out)
    else:
        root = pathlib.Path(os.environ.get(OUT_ROOT_ENV, "runs"))
        out_dir = root / config.name
    report = run_scenario(config, out_dir=out_dir, transport=args.mode, seed=args.seed)
    print(f"scenario {report.scenario} (seed {report.seed}, strategy {report.strategy})")
    for rec in report.rounds:
        kd = fmt_float(rec.mean_kd) if rec.mean_kd is not None else "-"
        print(f"  round {rec.round}: ensemble accuracy {rec.ensemble_accuracy:.4f}, "
              f"macro-F1 {rec.ensemble_macro_f1:.4f}, mean divergence {kd}, "
              f"contributors {rec.contributors}")
    print(f"  total bytes on the wire: {report.total_bytes()}")
    print(f"  artifacts written to {out_dir}")
    return EXIT_OK


def _cmd_replay(args) -> int:
    ok, where = replay_check(args.dir_a, args.dir_b)
    if ok:
        print("replay OK: all artifacts byte-identical")
        return EXIT_OK
    print(f"replay mismatch at {where}", file=sys.stderr)
    return EXIT_REPLAY


def _cmd_list() -> int:
    for name, path in sorted(shipped_scenarios().items()):
        print(f"{name}\t{path}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "replay-check":
            return _cmd_replay(args)
        return _cmd_list()
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProbEnsembleError, OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
