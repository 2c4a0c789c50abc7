"""Command-line entry point: run a scenario, validate one, or recompute metrics from a saved trace.

Exit codes: 0 run completed, 2 validation error, 3 internal contract violation.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from ..core.errors import ContractViolation
from .metrics import summarize_metrics
from .runner import run_closed_loop
from .scenario import ScenarioError, load_scenario
from .trace import read_trace

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_CONTRACT = 3


def _dump(doc: dict, path: Optional[str]) -> None:
    text = json.dumps(doc, sort_keys=True, indent=1, allow_nan=False)
    if path is None:
        print(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n", encoding="utf-8")


def _run(args: argparse.Namespace) -> int:
    spec = load_scenario(args.scenario).with_overrides(seed=args.seed, duration=args.ticks)
    res = run_closed_loop(spec, log_candidates=args.log_candidates)
    if args.trace:
        res.trace.write(args.trace)
    metrics = summarize_metrics(res.trace, series=args.series) if args.series else res.metrics
    _dump(metrics, args.metrics)
    return EXIT_OK


def _validate(args: argparse.Namespace) -> int:
    spec = load_scenario(args.scenario)
    print(f"{spec.name}: ok ({spec.duration} ticks, seed {spec.seed})")
    return EXIT_OK


def _replay(args: argparse.Namespace) -> int:
    try:
        records = read_trace(args.trace)
    except OSError as exc:
        raise ScenarioError(args.trace, f"cannot read trace: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise ScenarioError("", str(exc)) from None
    _dump(summarize_metrics(records, series=args.series), args.metrics)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="drivestack", description="Closed-loop driving stack harness.")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario to completion")
    run.add_argument("--scenario", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--ticks", type=int, help="override the scenario duration")
    run.add_argument("--trace", help="write the JSON Lines trace here")
    run.add_argument("--metrics", help="write the metrics document here instead of stdout")
    run.add_argument("--log-candidates", action="store_true", help="trace every assessed trajectory candidate")
    run.add_argument("--series", action="store_true", help="include per-tick plot series in the metrics")
    run.set_defaults(func=_run)

    val = sub.add_parser("validate", help="parse and cross-check a scenario without running it")
    val.add_argument("--scenario", required=True)
    val.set_defaults(func=_validate)

    rep = sub.add_parser("replay-metrics", help="recompute metrics from a saved trace")
    rep.add_argument("--trace", required=True)
    rep.add_argument("--metrics", help="write the metrics document here instead of stdout")
    rep.add_argument("--series", action="store_true", help="include per-tick plot series")
    rep.set_defaults(func=_replay)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ContractViolation as exc:
        where = f" at tick {exc.tick}" if exc.tick is not None else ""
        who = f" in {exc.module}" if exc.module else ""
        print(f"contract violation{who}{where}: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
