"""Command-line entry point: scenario ingestion, run orchestration, trace emission.

Exit codes (stable):
    0  clean completion
    1  unexpected internal error
    2  scenario parse/validation failure
    3  initial configuration infeasible
    4  solver infeasibility / round abort
    5  monitor violation under --strict-monitor
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .comms import RoundAbortError
from .scenario import (
    ScenarioValidationError,
    bundled_scenario_names,
    parse_scenario,
    save_scenario,
)
from .sim import InitialInfeasibilityError, MonitorViolationError, run_scenario

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_SCENARIO = 2
EXIT_INITIAL_INFEASIBLE = 3
EXIT_SOLVER_ABORT = 4
EXIT_MONITOR = 5


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cotransport",
        description="Decentralized receding-horizon cooperative transport simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario and write trace/messages/summary")
    run_p.add_argument("scenario_name", nargs="?", help="bundled scenario name or path")
    run_p.add_argument("--scenario", help="scenario file path (overrides the positional)")
    run_p.add_argument("--out", help="output directory (default: runs/<name>)")
    run_p.add_argument("--horizon", type=float, help="prediction horizon override [s]")
    run_p.add_argument("--total-time", type=float, help="total simulation time override [s]")
    run_p.add_argument("--seed", type=int, help="RNG seed override")
    run_p.add_argument(
        "--strict-monitor",
        action="store_true",
        help="abort with a nonzero exit on any constraint residual above tolerance",
    )
    run_p.add_argument("-v", "--verbose", action="store_true")

    sub.add_parser("scenarios", help="list bundled scenario names")

    val_p = sub.add_parser("validate", help="parse and validate a scenario file")
    val_p.add_argument("scenario", help="scenario file path or bundled name")
    return parser


def _fail(code: int, reason: str, detail: str) -> int:
    print(json.dumps({"exit_code": code, "reason": reason, "detail": detail}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "scenarios":
        for name in bundled_scenario_names():
            print(name)
        return EXIT_OK

    if args.command == "validate":
        try:
            config = parse_scenario(args.scenario)
        except (ScenarioValidationError, FileNotFoundError, OSError) as exc:
            return _fail(EXIT_SCENARIO, "scenario_invalid", str(exc))
        print(f"ok: {config.name} ({len(config.agents)} agents, {config.n_rounds} rounds)")
        return EXIT_OK

    # run
    if args.verbose:
        logging.basicConfig(level=logging.DEBUG, format="%(name)s %(message)s")
    source = args.scenario or args.scenario_name
    if source is None:
        return _fail(EXIT_SCENARIO, "scenario_missing", "no scenario given")
    try:
        config = parse_scenario(source)
        if args.horizon is not None:
            config.prediction_horizon_s = args.horizon
        if args.total_time is not None:
            config.total_time_s = args.total_time
        if args.seed is not None:
            config.seed = args.seed
        config.validate()
    except (ScenarioValidationError, FileNotFoundError, OSError) as exc:
        return _fail(EXIT_SCENARIO, "scenario_invalid", str(exc))

    out_dir = Path(args.out) if args.out else Path("runs") / config.name
    try:
        result = run_scenario(config, out_dir=out_dir, strict_monitor=args.strict_monitor)
    except InitialInfeasibilityError as exc:
        return _fail(EXIT_INITIAL_INFEASIBLE, "initial infeasibility", str(exc))
    except RoundAbortError as exc:
        trace = getattr(exc, "trace", None)
        if trace is not None and len(trace):
            trace.to_csv(out_dir / "trace_partial.csv")
        return _fail(EXIT_SOLVER_ABORT, "solver_abort", f"{exc.agent}: {exc}")
    except MonitorViolationError as exc:
        return _fail(EXIT_MONITOR, "monitor_violation", "; ".join(exc.labels[:5]))
    except Exception as exc:  # noqa: BLE001
        return _fail(EXIT_UNEXPECTED, "internal_error", f"{type(exc).__name__}: {exc}")

    # echo the effective config next to the outputs for reproducibility
    save_scenario(config, out_dir / "scenario_effective.yaml")
    print(f"run complete: {result.status}")
    for key in ("final_error", "rounds", "max_abs_input", "min_obstacle_clearance", "wall_clock_s"):
        print(f"  {key}: {result.summary[key]}")
    print(f"  outputs: {out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
