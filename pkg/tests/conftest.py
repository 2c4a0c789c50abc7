"""Shared fixtures: scenario paths, cached closed-loop runs and small record builders."""
from __future__ import annotations

from pathlib import Path

import pytest

from drivestack.core.geometry import Pose2D
from drivestack.core.provenance import VEH
from drivestack.core.types import Availability, Health, Maneuver, SelfRepresentation
from drivestack.harness.runner import run_closed_loop
from drivestack.harness.scenario import load_scenario

SCENARIOS = Path(__file__).resolve().parents[1] / "src" / "drivestack" / "scenarios"
GOLDEN = Path(__file__).resolve().parent / "golden"

_RUNS: dict = {}


def pytest_addoption(parser):
    parser.addoption("--update-golden", action="store_true", default=False,
                     help="rewrite the golden metric summaries from a fresh run")


@pytest.fixture
def update_golden(request) -> bool:
    return request.config.getoption("--update-golden")


def scenario_path(name: str) -> Path:
    return SCENARIOS / f"{name}.json"


def bundled_scenarios() -> list[str]:
    return sorted(p.stem for p in SCENARIOS.glob("*.json"))


def run_named(name: str):
    """Run a bundled scenario once per session and reuse the result."""
    if name not in _RUNS:
        _RUNS[name] = run_closed_loop(load_scenario(scenario_path(name)))
    return _RUNS[name]


def self_rep(pose: Pose2D = Pose2D(0.0, 0.0, 0.0), speed: float = 0.0, provenance=VEH) -> SelfRepresentation:
    return SelfRepresentation(pose, speed, (0.0, 0.0, 0.0), 1.0, {"steering": Health.OK},
                              {m: Availability.AVAILABLE for m in Maneuver}, provenance)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
