"""Command-line front end.

Four subcommands cover the package's workflows:

``run``
    One closed-loop trial, verbose: prints the outcome, clearance,
    capture progress, and the query-depth histogram.
``experiment``
    A batch of independent trials; writes trials.csv, queries.csv,
    paths.csv, and summary.csv into ``--out``.
``plot``
    Renders the overhead-path and query-depth figures from a directory
    of experiment CSVs.
``oracle``
    Runs the independent cross-check suites (Monte Carlo collision
    probability, finite-difference gradients, recursion-vs-DP series
    coefficients, collocation order) and reports pass/fail.

Every trial-configuration field can come from a YAML config file
(``--config``); explicit flags override file values.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np
import yaml

from .figures import emit_figures
from .harness import (TrialConfig, run_experiment, run_trial,
                      trial_config_from_dict, write_experiment_csvs,
                      ExperimentResult)
from .oracles import ORACLE_NAMES, run_named_oracle

# scalar TrialConfig fields exposed one-to-one as flags:
# (flag, field, type)
_SCALAR_FLAGS = [
    ("--world", "world", str),
    ("--history-limit", "history_limit", int),
    ("--depth-noise-sigma", "depth_noise_sigma", float),
    ("--seed", "seed", int),
    ("--trial-count", "trial_count", int),
    ("--vehicle", "vehicle", str),
    ("--speed", "speed", float),
    ("--timeout", "timeout", float),
    ("--physics-rate-hz", "physics_rate_hz", float),
    ("--camera-rate-hz", "camera_rate_hz", float),
    ("--replan-rate-hz", "replan_rate_hz", float),
    ("--vehicle-radius", "vehicle_radius", float),
    ("--camera-width", "camera_width", int),
    ("--camera-height", "camera_height", int),
    ("--horizontal-fov-deg", "horizontal_fov_deg", float),
    ("--vertical-fov-deg", "vertical_fov_deg", float),
    ("--camera-range", "camera_range", float),
    ("--point-stride", "point_stride", int),
    ("--n-knots", "n_knots", int),
    ("--horizon-time", "horizon_time", float),
    ("--obstacle-neighbors", "obstacle_neighbors", int),
    ("--sqp-iters", "sqp_iters", int),
    ("--sqp-tol", "sqp_tol", float),
    ("--rrt-max-iters", "rrt_max_iters", int),
    ("--rrt-step", "rrt_step", float),
    ("--rrt-clearance", "rrt_clearance", float),
    ("--blend-radius", "blend_radius", float),
    ("--global-replan-period", "global_replan_period", float),
    ("--plan-failure-limit", "plan_failure_limit", int),
]


def _add_trial_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE",
                   help="YAML file supplying any trial-config fields")
    for flag, field, typ in _SCALAR_FLAGS:
        p.add_argument(flag, dest=field, type=typ, default=None)
    p.add_argument("--rrt-uses-history", dest="rrt_uses_history",
                   action=argparse.BooleanOptionalAction, default=None,
                   help="route the global planner through the rolling "
                        "history map (default) or a single-frame map")
    p.add_argument("--dt-uses-history", dest="dt_uses_history",
                   action=argparse.BooleanOptionalAction, default=None,
                   help="route the trajectory optimizer through the rolling "
                        "history map (default) or a single-frame map")
    p.add_argument("--position-noise-diag", dest="position_noise_diag",
                   type=float, nargs=3, metavar=("XX", "YY", "ZZ"),
                   default=None,
                   help="diagonal of the pose-estimate noise covariance")
    p.add_argument("--constraint", dest="constraint_kind", default=None,
                   choices=["distance", "inflated", "probability"],
                   help="obstacle constraint family for the optimizer")
    p.add_argument("--radius", dest="constraint_radius", type=float,
                   default=None, help="constraint radius r in metres")
    p.add_argument("--n-sigma", dest="constraint_n_sigma", type=float,
                   default=None,
                   help="inflation multiplier (inflated constraint)")
    p.add_argument("--s-max", dest="constraint_s_max", type=float,
                   default=None,
                   help="collision-probability ceiling (probability "
                        "constraint)")


def _config_from_args(args: argparse.Namespace) -> TrialConfig:
    data: dict = {}
    if args.config:
        with open(args.config) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{args.config}: expected a mapping at the "
                             "top level")
        data.update(loaded)
    for _, field, _ in _SCALAR_FLAGS:
        value = getattr(args, field)
        if value is not None:
            data[field] = value
    for field in ("rrt_uses_history", "dt_uses_history"):
        value = getattr(args, field)
        if value is not None:
            data[field] = value
    if args.position_noise_diag is not None:
        data["position_noise_cov"] = list(args.position_noise_diag)
    cons = data.get("constraint")
    cons = dict(cons) if isinstance(cons, dict) else (
        {"kind": cons} if cons is not None else {})
    if args.constraint_kind is not None:
        cons["kind"] = args.constraint_kind
    if args.constraint_radius is not None:
        cons["r"] = args.constraint_radius
    if args.constraint_n_sigma is not None:
        cons["n_sigma"] = args.constraint_n_sigma
    if args.constraint_s_max is not None:
        cons["s_max"] = args.constraint_s_max
    if cons:
        data["constraint"] = cons
    return trial_config_from_dict(data)


def _print_trial(rec) -> None:
    print(f"outcome:        {rec.outcome}")
    print(f"duration:       {rec.duration:.2f} s")
    print(f"waypoints hit:  {rec.waypoints_hit}")
    print(f"min clearance:  {rec.min_clearance:.3f} m")
    print(f"wall time:      {rec.wall_time:.1f} s")
    if rec.error:
        print(f"error:          {rec.error}")
    if rec.query_depths:
        total = sum(rec.query_depths.values())
        print("query depths (frame-age histogram):")
        for depth in sorted(rec.query_depths):
            n = rec.query_depths[depth]
            print(f"  {depth:4d}: {n:6d}  ({100.0 * n / total:.1f}%)")


def _cmd_run(args) -> int:
    cfg = _config_from_args(args)
    rec = run_trial(cfg, args.trial_index)
    _print_trial(rec)
    if args.out:
        paths = write_experiment_csvs(ExperimentResult(cfg, [rec]), args.out)
        print("wrote", ", ".join(str(p) for p in paths.values()))
    return 0 if rec.outcome.startswith("Success") else 1


def _cmd_experiment(args) -> int:
    cfg = _config_from_args(args)

    def progress(rec):
        print(f"trial {rec.trial_index:3d}: {rec.outcome:22s} "
              f"clearance={rec.min_clearance:7.3f}  "
              f"duration={rec.duration:6.2f}s", flush=True)

    result = run_experiment(cfg, out_dir=args.out,
                            confidence=args.confidence,
                            progress=progress if not args.quiet else None)
    print(f"\n{'outcome':24s} {'count':>5s} {'rate':>7s}   "
          f"{int(args.confidence * 100)}% interval")
    for outcome, k, rate, lo, hi in result.summary_rows(args.confidence):
        print(f"{outcome:24s} {k:5d} {rate:7.3f}   [{lo:.3f}, {hi:.3f}]")
    print(f"\nCSV output in {args.out}")
    return 0


def _cmd_plot(args) -> int:
    out = emit_figures(args.csv_dir, out_dir=args.out, world=args.world,
                       dpi=args.dpi)
    print(f"overhead paths:  {out['overhead']}")
    print(f"query depths:    {out['queries']} "
          f"(total count {out['histogram_total']})")
    return 0


def _cmd_oracle(args) -> int:
    names = list(ORACLE_NAMES) if args.name == "all" else [args.name]
    ok = True
    for name in names:
        ok = run_named_oracle(name, print_fn=print) and ok
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fwnav",
        description="Fixed-wing navigation stack: closed-loop trials, "
                    "experiment batches, figures, and numeric oracles.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one trial, verbose")
    _add_trial_flags(p_run)
    p_run.add_argument("--trial-index", type=int, default=0)
    p_run.add_argument("--out", default=None,
                       help="also write the trial's CSVs here")
    p_run.set_defaults(func=_cmd_run)

    p_exp = sub.add_parser("experiment", help="run a trial batch")
    _add_trial_flags(p_exp)
    p_exp.add_argument("--out", required=True,
                       help="directory for trials/queries/paths/summary CSVs")
    p_exp.add_argument("--confidence", type=float, default=0.95)
    p_exp.add_argument("--quiet", action="store_true",
                       help="suppress per-trial progress lines")
    p_exp.set_defaults(func=_cmd_experiment)

    p_plot = sub.add_parser("plot", help="render figures from CSVs")
    p_plot.add_argument("--csv-dir", required=True)
    p_plot.add_argument("--out", default=None,
                        help="output directory (default: the CSV directory)")
    p_plot.add_argument("--world", default=None,
                        help="world whose footprint to draw under the paths")
    p_plot.add_argument("--dpi", type=int, default=130)
    p_plot.set_defaults(func=_cmd_plot)

    p_or = sub.add_parser("oracle", help="run numeric cross-check suites")
    p_or.add_argument("name", choices=list(ORACLE_NAMES) + ["all"])
    p_or.set_defaults(func=_cmd_oracle)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
