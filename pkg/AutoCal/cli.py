# cli.py — experiment runner: `run` a scenario through the pipeline, `compare` two report directories
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from .errors import ReportError, ScenarioError, SolverError
from .pipeline import run_pipeline
from .report import compare, load_report
from .settings import Settings, configure_logging, get_settings
from .sim import Scenario, dump_stream, generate, load_scenario

logger = logging.getLogger(__name__)

SCENARIO_DIR = Path(__file__).resolve().parent / "scenarios"

EXIT_OK = 0
EXIT_SCENARIO = 1
EXIT_NUMERICAL = 2


def resolve_scenario(name_or_path: str) -> Path:
    """A path to a scenario file, or the stem of a bundled one (e.g. `zoom`)."""
    p = Path(name_or_path)
    if p.is_file():
        return p
    bundled = SCENARIO_DIR / f"{name_or_path}.env"
    return bundled if bundled.is_file() else p


def settings_from_args(args: argparse.Namespace, base: Optional[Settings] = None) -> Settings:
    base = base or get_settings()
    update: Dict[str, Any] = {}
    for flag, name in (("alpha", "alpha"), ("ntest", "n_test"), ("pq_size", "pq_size"),
                       ("segment_size", "segment_size"), ("change_index_mode", "change_index_mode")):
        value = getattr(args, flag, None)
        if value is not None:
            update[name] = value
    if getattr(args, "no_change_detection", False):
        update["change_detection"] = False
    if getattr(args, "background_adapt", False):
        update["background_adapt"] = True
    if getattr(args, "debug", False):
        update["debug"] = True
    return Settings.model_validate({**base.model_dump(), **update})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autocal", description="Self-calibrating monocular SLAM experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write trace/summary CSVs")
    run.add_argument("--scenario", default="default", help="scenario file or bundled scenario name")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--out", default="out", help="output directory")
    run.add_argument("--alpha", type=float, default=None, help="change test significance level")
    run.add_argument("--ntest", type=int, default=None, help="consecutive rejections required")
    run.add_argument("--pq-size", type=int, default=None, help="priority queue capacity k")
    run.add_argument("--segment-size", type=int, default=None, help="candidate segment size m")
    run.add_argument("--change-index-mode", choices=("keyframe", "segment"), default=None)
    run.add_argument("--no-change-detection", action="store_true")
    run.add_argument("--background-adapt", action="store_true", help="run window expansion in a worker thread")
    run.add_argument("--dump-stream", default=None, help="also write the keyframe stream as JSON lines")
    run.add_argument("--debug", action="store_true")

    cmp_ = sub.add_parser("compare", help="per-column max deviation between two report directories")
    cmp_.add_argument("a")
    cmp_.add_argument("b")
    return parser


def cmd_run(args: argparse.Namespace) -> int:
    settings = settings_from_args(args)
    configure_logging(settings)
    try:
        scenario = load_scenario(resolve_scenario(args.scenario), seed=args.seed)
        stream, truth = generate(scenario)
    except ScenarioError as e:
        print(f"error: {e} ({e.reason})", file=sys.stderr)
        return EXIT_SCENARIO
    if args.dump_stream:
        dump_stream(stream, args.dump_stream, scenario)
    try:
        report = run_pipeline(stream, truth, settings, scenario)
    except SolverError as e:
        print(f"error: numerical failure: {e} ({e.reason})", file=sys.stderr)
        return EXIT_NUMERICAL
    out = report.write(args.out)
    print(json.dumps(report.summary.model_dump(), indent=2, default=str))
    logger.info("report written to %s", out)
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    try:
        result = compare(load_report(args.a), load_report(args.b))
    except ReportError as e:
        print(f"error: {e} ({e.reason})", file=sys.stderr)
        return EXIT_SCENARIO
    print(json.dumps({"rows_a": result.rows_a, "rows_b": result.rows_b,
                      "max_deviation": result.max_deviation, "deviations": result.deviations}, indent=2))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    return cmd_compare(args)


if __name__ == "__main__":
    sys.exit(main())
