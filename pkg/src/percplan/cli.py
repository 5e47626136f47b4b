"""Batch front-end: run scenarios, compare planner arms, run oracle suites.

Exit codes: 0 success, 1 usage or scenario-parse error, 2 runtime failure
(including a post-hoc safety violation), 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from percplan.oracles import SUITES
from percplan.scenario import Scenario, ScenarioError, parse_scenario, with_overrides
from percplan.sim import RunResult, log_to_csv, min_clearance, run_loop

_OUT_ENV = "PERCPLAN_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt_k(k: float) -> str:
    return format(k, "g")


def _run_once(scenario: Scenario, seed: int, k_perc: Optional[float]) -> RunResult:
    sc = with_overrides(scenario, seed=seed, k_perc=k_perc)
    return run_loop(sc.world, sc.planner, sc.run, sc.intrinsics)


def _write_run(out_dir: Path, name: str, k: float, seed: int, result: RunResult) -> dict:
    stem = f"{name}_k{_fmt_k(k)}_seed{seed}"
    (out_dir / f"{stem}.csv").write_bytes(log_to_csv(result.records).encode("ascii"))
    summary = dict(result.summary)
    summary["seed"] = seed
    summary["k_perc"] = k
    summary["min_clearance"] = float(min_clearance(result.records, result.world))
    (out_dir / f"{stem}.summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n"
    )
    return summary


_METRIC_KEYS = [
    "mean_pos_std", "mean_angular_velocity", "mean_feature_count", "mean_speed",
]


def cmd_run(args) -> int:
    try:
        scenario = parse_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    base_seed = args.seed if args.seed is not None else scenario.run.seed
    radius = scenario.planner.collision.vehicle_radius
    summaries = []
    for rep in range(args.reps):
        seed = base_seed + rep
        result = _run_once(scenario, seed, args.k_perc)
        summary = _write_run(
            out_dir, scenario.name,
            args.k_perc if args.k_perc is not None else scenario.planner.k_perc,
            seed, result,
        )
        summaries.append(summary)
        print(
            f"run seed={seed}: status={summary['status']} "
            f"speed={summary.get('mean_speed', float('nan')):.3f} "
            f"features={summary.get('mean_feature_count', float('nan')):.1f}"
        )
        if summary["min_clearance"] < radius:
            print(
                f"error: safety violation, clearance {summary['min_clearance']:.3f} m "
                f"< vehicle radius {radius} m",
                file=sys.stderr,
            )
            return 2
    aggregate = {"repetitions": args.reps, "scenario": scenario.name}
    for key in _METRIC_KEYS:
        vals = [s[key] for s in summaries if key in s and np.isfinite(s[key])]
        aggregate[key] = float(np.mean(vals)) if vals else float("inf")
    aggregate["statuses"] = [s["status"] for s in summaries]
    (out_dir / f"{scenario.name}_aggregate.json").write_text(
        json.dumps(aggregate, sort_keys=True, indent=2) + "\n"
    )
    return 0


_ROW_LABELS = {
    "mean_pos_std": "mean pos. est. std [m]",
    "mean_angular_velocity": "mean angular velocity [rad/s]",
    "mean_feature_count": "mean feature number in FOV",
    "mean_speed": "mean speed [m/s]",
}


def comparison_table(means_a: dict, means_b: dict, k_a: float, k_b: float) -> str:
    rows = [f"{'':38s} {'k=' + _fmt_k(k_a):>12s} {'k=' + _fmt_k(k_b):>12s} {'difference':>12s}"]
    for key in _METRIC_KEYS:
        a, b = means_a.get(key), means_b.get(key)
        if a is None or b is None:
            rows.append(f"{_ROW_LABELS[key]:38s} {'failed':>12s} {'failed':>12s} {'-':>12s}")
            continue
        diff = (b - a) / a * 100.0 if a not in (0.0,) and np.isfinite(a) else float("nan")
        rows.append(
            f"{_ROW_LABELS[key]:38s} {a:12.4f} {b:12.4f} {diff:+11.1f}%"
        )
    return "\n".join(rows)


def cmd_compare(args) -> int:
    try:
        scenario = parse_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    base_seed = args.seed if args.seed is not None else scenario.run.seed
    arms = {}
    failed = False
    for label, k in (("a", args.k_perc_a), ("b", args.k_perc_b)):
        per_metric = {key: [] for key in _METRIC_KEYS}
        statuses = []
        radius = scenario.planner.collision.vehicle_radius
        for rep in range(args.reps):
            seed = base_seed + rep  # matched seeds across both arms
            result = _run_once(scenario, seed, k)
            summary = _write_run(out_dir, scenario.name, k, seed, result)
            statuses.append(summary["status"])
            if summary["min_clearance"] < radius:
                failed = True
                continue
            for key in _METRIC_KEYS:
                if np.isfinite(summary.get(key, float("inf"))):
                    per_metric[key].append(summary[key])
        if all(len(v) == 0 for v in per_metric.values()):
            failed = True
            arms[label] = {}
        else:
            arms[label] = {k2: float(np.mean(v)) for k2, v in per_metric.items() if v}
        arms[label + "_status"] = statuses
    table = comparison_table(arms["a"], arms["b"], args.k_perc_a, args.k_perc_b)
    print(table)
    (out_dir / f"{scenario.name}_comparison.txt").write_text(table + "\n")
    return 2 if failed else 0


def cmd_verify(args) -> int:
    if args.suite not in SUITES:
        print(f"error: unknown suite {args.suite!r}; choose from {sorted(SUITES)}",
              file=sys.stderr)
        return 1
    result = SUITES[args.suite]()
    print(result.line())
    return 0 if result.passed else 3


def build_parser() -> _Parser:
    parser = _Parser(prog="percplan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    default_out = os.environ.get(_OUT_ENV, "percplan_out")

    p_run = sub.add_parser("run", help="run a scenario, write logs and summaries")
    p_run.add_argument("--scenario", required=True)
    p_run.add_argument("--out", default=default_out)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--k-perc", dest="k_perc", type=float, default=None)
    p_run.add_argument("--reps", type=int, default=1)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="paired planner comparison, matched seeds")
    p_cmp.add_argument("--scenario", required=True)
    p_cmp.add_argument("--out", default=default_out)
    p_cmp.add_argument("--seed", type=int, default=None)
    p_cmp.add_argument("--k-perc-a", dest="k_perc_a", type=float, default=0.0)
    p_cmp.add_argument("--k-perc-b", dest="k_perc_b", type=float, default=100.0)
    p_cmp.add_argument("--reps", type=int, default=3)
    p_cmp.set_defaults(func=cmd_compare)

    p_ver = sub.add_parser("verify", help="run an oracle verification suite")
    p_ver.add_argument("--suite", required=True)
    p_ver.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
