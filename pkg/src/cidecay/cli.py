"""Command-line frontend.

Every command computes its results first and only then writes artifacts,
so a failing command leaves the output directory untouched. Exit codes:
0 success, 1 domain or validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import pandas as pd

from . import __version__
from ._validation import DomainError, EstimationError
from .model import simulate
from .planner import PlanQuery, compare_designs, power_curve, required_duration
from .serialization import (
    ConfigError,
    config_from_dict,
    panel_to_frame,
    pre_to_frame,
    read_json,
    read_panel_csv,
    read_width_series_csv,
)
from .sim import MIN_VALIDATE_REPLICATIONS, check_report, run_replications, sim_config_from_dict
from .sim import summarize_coverage, summarize_decay
from .utc import estimate_utc_from_panels, estimate_utc_from_widths

EXIT_OK, EXIT_DOMAIN, EXIT_IO = 0, 1, 2


@dataclass
class CommandResult:
    """Outcome of a command; ``artifacts`` maps file names to their text."""

    exit_code: int
    summary: str
    artifacts: dict = field(default_factory=dict)


def _g(x):
    return f"{x:.4g}"


def _csv(frame):
    return frame.to_csv(index=False, lineterminator="\n")


def _json(obj):
    return json.dumps(obj, indent=2) + "\n"


def _load_json(path):
    try:
        return read_json(path)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None


# -- commands --------------------------------------------------------------

def cmd_simulate(config_path, seed=None):
    doc = _load_json(config_path)
    if seed is not None and isinstance(doc, dict):
        doc = {**doc, "seed": seed}
    params, design, seed = config_from_dict(doc)
    panel, pre = simulate(params, design, seed)
    artifacts = {"panel.csv": _csv(panel_to_frame(panel))}
    if pre is not None:
        artifacts["pre.csv"] = _csv(pre_to_frame(pre))
    rows = 2 * design.n_per_arm * design.t_days
    summary = f"simulated {design.n_per_arm} users per arm over {design.t_days} days ({rows} rows)"
    if pre is not None:
        summary += f", pre-period of {design.t0_days} days"
    return CommandResult(EXIT_OK, summary, artifacts)


def cmd_estimate_utc(paths, method="panel", max_lag=None):
    if not paths:
        raise DomainError("no input files given")
    if method == "panel":
        est = estimate_utc_from_panels([read_panel_csv(p) for p in paths], max_lag)
    elif method == "widths":
        series = [s for p in paths for s in read_width_series_csv(p)]
        est = estimate_utc_from_widths(series)
    else:
        raise DomainError(f"unknown method {method!r}")
    summary = f"rho_hat = {_g(est.rho_hat)} ({est.method}, {est.n_experiments} experiment(s))"
    if est.clamped:
        summary += f"; {_g(100 * est.clamped_fraction)}% of raw estimates clamped to [0, 1]"
    return CommandResult(EXIT_OK, summary, {"utc.json": _json(est.to_dict())})


def cmd_plan(rho, day1_width=1.0, target_width=None, t0=0, max_t=365):
    if target_width is None:
        raise DomainError("--target-width is required")
    query = PlanQuery(rho, day1_width, target_width, t0, max_t)
    plan = required_duration(query)
    curve = pd.DataFrame(power_curve(query), columns=["t", "width"])
    if plan.feasible:
        summary = f"T = {plan.t_days}"
    elif plan.reason == "floor":
        summary = (
            f"INFEASIBLE: target {_g(target_width)} is at or below the floor "
            f"{_g(plan.floor_width)} reachable at any duration; increase N instead"
        )
    else:
        summary = f"INFEASIBLE: target {_g(target_width)} is not reached within {max_t} days"
    return CommandResult(EXIT_OK, summary, {"power_curve.csv": _csv(curve)})


def cmd_compare_designs(rho, t0=7, max_t=20):
    if rho == 1.0:
        raise DomainError("rho = 1 is degenerate: pre-period and experiment averages coincide")
    comp = compare_designs(rho, t0, max_t)
    frame = pd.DataFrame(comp.rows(), columns=["t", "se_user_plain", "se_user_prepost", "se_userday"])
    if comp.equivalent:
        summary = "no crossover: designs equivalent"
    elif comp.crossover_t is None:
        summary = "no crossover within horizon"
    else:
        summary = f"crossover_t = {comp.crossover_t}"
    return CommandResult(
        EXIT_OK, summary, {"designs.csv": _csv(frame), "designs.json": _json(comp.to_dict())}
    )


def cmd_validate(config_path, seed=None, threads=None):
    doc = _load_json(config_path)
    if seed is not None and isinstance(doc, dict):
        doc = {**doc, "seed": seed}
    config = sim_config_from_dict(doc)
    if config.replications < MIN_VALIDATE_REPLICATIONS:
        raise DomainError(
            f"replications = {config.replications} is too few to validate; "
            f"use at least {MIN_VALIDATE_REPLICATIONS}"
        )
    if threads is not None:
        config = replace(config, threads=threads)
    results = run_replications(config)
    report = summarize_decay(results, config)
    coverage = summarize_coverage(results, config)
    ok, problems = check_report(report, config)
    summary_doc = report.summary()
    summary_doc["coverage_tolerance"] = config.effective_coverage_tolerance
    summary_doc["max_width_gap"] = config.max_width_gap
    summary_doc["passed"] = ok
    artifacts = {
        "decay.csv": _csv(report.to_frame()),
        "coverage.csv": _csv(coverage.to_frame()),
        "validate.json": _json(summary_doc),
    }
    head = (
        f"max width gap {_g(summary_doc['max_abs_gap'])} at T={summary_doc['worst_t']}, "
        f"coverage {_g(summary_doc['min_coverage'])}..{_g(summary_doc['max_coverage'])} "
        f"over {report.replications} replications ({report.n_failed} failed)"
    )
    if ok:
        return CommandResult(EXIT_OK, "PASS: " + head, artifacts)
    return CommandResult(EXIT_DOMAIN, "FAIL: " + "; ".join(problems) + "\n" + head, artifacts)


# -- plumbing --------------------------------------------------------------

def _commit(artifacts, out_dir):
    """Write every artifact via a temporary file and an atomic rename."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in artifacts.items():
        target = out / name
        tmp = out / f".{name}.{os.getpid()}.tmp"
        try:
            with open(tmp, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def _add_globals(p, suppress):
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=default, help="override the random seed")
    p.add_argument("--threads", type=int, default=default, help="worker threads for simulations")
    p.add_argument("--out", default=argparse.SUPPRESS if suppress else ".", help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cidecay", description="Plan A/B experiment duration and size from CI-width decay."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one experiment into panel CSVs")
    p.add_argument("config", help="JSON parameter document")
    _add_globals(p, suppress=True)

    p = sub.add_parser("estimate-utc", help="estimate the UTC from past experiments")
    p.add_argument("inputs", nargs="+", help="panel CSVs or width-series CSVs")
    p.add_argument("--method", choices=("panel", "widths"), default="panel")
    p.add_argument("--max-lag", type=int, default=None)
    _add_globals(p, suppress=True)

    p = sub.add_parser("plan", help="required duration for a target CI width")
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--day1-width", type=float, default=1.0)
    p.add_argument("--target-width", type=float, required=True)
    p.add_argument("--t0", type=int, default=0)
    p.add_argument("--max-t", type=int, default=365)
    _add_globals(p, suppress=True)

    p = sub.add_parser("compare-designs", help="user vs user-day design standard errors")
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--t0", type=int, default=7)
    p.add_argument("--max-t", type=int, default=20)
    _add_globals(p, suppress=True)

    p = sub.add_parser("validate", help="check the formulas against simulation")
    p.add_argument("config", help="JSON simulation document")
    _add_globals(p, suppress=True)
    return parser


def run(args):
    if args.command == "simulate":
        return cmd_simulate(args.config, args.seed)
    if args.command == "estimate-utc":
        return cmd_estimate_utc(args.inputs, args.method, args.max_lag)
    if args.command == "plan":
        return cmd_plan(args.rho, args.day1_width, args.target_width, args.t0, args.max_t)
    if args.command == "compare-designs":
        return cmd_compare_designs(args.rho, args.t0, args.max_t)
    if args.command == "validate":
        return cmd_validate(args.config, args.seed, args.threads)
    raise DomainError(f"unknown command {args.command!r}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        result = run(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, EstimationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    try:
        _commit(result.artifacts, args.out)
    except OSError as exc:
        print(f"error: cannot write artifacts: {exc}", file=sys.stderr)
        return EXIT_IO
    stream = sys.stdout if result.exit_code == EXIT_OK else sys.stderr
    print(result.summary, file=stream)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
