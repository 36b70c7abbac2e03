"""Command-line entry points.

Verbs:
    gen      generate a mission and dump its ground-truth CSVs
    run      execute one mission end to end and report metrics
    sweep    evaluate the overlap acceptance gate at several thresholds
    compare  run paired variants along one configuration axis
    report   pretty-print the metrics.csv of a finished run

Exit codes: 0 on success, 1 on configuration errors, 2 on runtime
failures.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

from fleetslam.harness import (MISSIONS, ConfigError, RunConfig,
                               load_mission, run, sweep, compare,
                               write_mission_csv)
from fleetslam.sim import run_mission


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mission", default="two_robot",
                        help="canned mission name (%s) or a YAML path"
                        % ", ".join(sorted(MISSIONS)))
    parser.add_argument("--seed", type=int, default=None,
                        help="override the mission seed")
    parser.add_argument("--steps", type=int, default=None,
                        help="override the mission length")
    parser.add_argument("--out", default=None,
                        help="artifact directory (omit to skip writing)")


def _add_run_opts(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--window", type=int, default=1,
                        help="registration window half-width in keyframes")
    parser.add_argument("--epsilon-overlap", type=float, default=0.9,
                        help="overlap acceptance gate in [0, 1]")
    parser.add_argument("--consistency", choices=("gcm", "pcm"),
                        default="gcm", help="closure vetting mode")
    parser.add_argument("--pgo", choices=("two_step", "full"),
                        default="two_step", help="optimizer layout")


def _config(args: argparse.Namespace) -> RunConfig:
    return RunConfig(
        mission=args.mission, seed=args.seed, steps=args.steps,
        consistency_mode=getattr(args, "consistency", "gcm"),
        pgo_mode=getattr(args, "pgo", "two_step"),
        window=getattr(args, "window", 1),
        epsilon_overlap=getattr(args, "epsilon_overlap", 0.9),
        out_dir=args.out)


def _print_report(report, indent: str = "") -> None:
    for key, value in report.rows():
        print(f"{indent}{key}: {value}")


def cmd_gen(args: argparse.Namespace) -> int:
    config = _config(args)
    config.validate()
    mission = run_mission(load_mission(config))
    if args.out:
        write_mission_csv(mission, args.out)
    n_pts = sum(len(s) for scans in mission.scans.values() for s in scans)
    print(f"mission {config.mission}: {len(mission.robot_ids())} robots, "
          f"{mission.spec.steps} steps, {len(mission.world.objects)} "
          f"objects, {n_pts} scan points")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    result = run(_config(args))
    _print_report(result.report)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    thresholds = [float(t) for t in args.thresholds.split(",") if t.strip()]
    rows = sweep(_config(args), thresholds)
    print("threshold detected true_positives precision")
    for row in rows:
        print(f"{row.threshold:.3f} {row.detected} {row.true_positives} "
              f"{row.precision:.4f}")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    for label, report in compare(_config(args), args.axis):
        print(f"[{label}]")
        _print_report(report, indent="  ")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    path = os.path.join(args.dir, "metrics.csv")
    if not os.path.exists(path):
        raise ConfigError(f"no metrics.csv under {args.dir!r}")
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            print(f"{row['key']}: {row['value']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fleetslam",
        description="distributed multi-robot sonar SLAM playground")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen", help="generate mission data")
    _add_common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="run one mission")
    _add_common(p)
    _add_run_opts(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="sweep the overlap gate")
    _add_common(p)
    _add_run_opts(p)
    p.add_argument("--thresholds", default="0.5,0.6,0.7,0.8,0.9",
                   help="comma-separated overlap thresholds")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="compare paired configurations")
    _add_common(p)
    _add_run_opts(p)
    p.add_argument("--axis", choices=("consistency", "pgo", "window"),
                   default="consistency")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="print a finished run's metrics")
    p.add_argument("dir", help="artifact directory of a previous run")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"fatal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
