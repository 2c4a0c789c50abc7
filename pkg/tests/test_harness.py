"""Scenario loading, trace ordering, metrics fold, fault injection and the command line."""
from __future__ import annotations

import dataclasses
import json
import math

import pytest

from drivestack.config import Timing
from drivestack.core.errors import ContractViolation
from drivestack.harness import cli
from drivestack.harness.metrics import empty_metrics, summarize_metrics
from drivestack.harness.runner import run_closed_loop
from drivestack.harness.scenario import FaultSpec, ScenarioError, load_scenario, parse_scenario
from drivestack.harness.trace import MODULE_ORDER, Trace, TraceRecord, read_trace
from drivestack.world.sim import FaultWindow

from conftest import GOLDEN, SCENARIOS, run_named, scenario_path

GUIDANCE_EVERY = Timing().guidance_every


def minimal(**extra):
    d = {"name": "tiny", "duration": 10, "maps": {"roads": "maps/straight_roads.json", "lanes": "maps/straight_lanes.json"},
         "ego": {"x": 0.0, "y": 0.0}}
    d.update(extra)
    return d


# --- scenario loading ---------------------------------------------------------------

def test_minimal_scenario_gets_defaults():
    spec = parse_scenario(minimal(), base=SCENARIOS)
    assert spec.seed == 0 and spec.mission is None and spec.agents == () and spec.faults == ()
    assert spec.ego.heading == 0.0 and spec.ego.speed == 0.0
    assert spec.channel.loss == 0.0 and spec.energy_level == 1.0
    assert spec.maps.features.landmarks == ()


def test_missing_map_file_names_the_path():
    d = minimal(maps={"roads": "maps/nowhere_roads.json", "lanes": "maps/straight_lanes.json"})
    with pytest.raises(ScenarioError) as err:
        parse_scenario(d, base=SCENARIOS)
    assert "nowhere_roads.json" in str(err.value) and err.value.where == "maps.roads"


@pytest.mark.parametrize("key, events", [
    ("hmi", [{"tick": 20, "level": "operational", "setpoint": ["time_gap", 2.0]},
             {"tick": 10, "level": "operational", "setpoint": ["time_gap", 2.5]}]),
    ("faults", [{"start": 50, "mode": "gnss_outage", "component": "gnss"},
                {"start": 10, "mode": "gnss_outage", "component": "gnss"}]),
])
def test_unsorted_events_are_rejected(key, events):
    with pytest.raises(ScenarioError, match="sorted"):
        parse_scenario(minimal(**{key: events}), base=SCENARIOS)


@pytest.mark.parametrize("extra, where", [
    ({"colour": "red"}, "colour"),
    ({"faults": [{"start": 1, "mode": "sensor_dropout", "component": "radar_9"}]}, "faults[0].component"),
    ({"mission": {"waypoints": [99]}}, "mission.waypoints[0]"),
    ({"channel": {"loss": 2.0}}, "channel.loss"),
])
def test_schema_violations_name_the_field(extra, where):
    with pytest.raises(ScenarioError) as err:
        parse_scenario(minimal(**extra), base=SCENARIOS)
    assert where in str(err.value)


def test_unreadable_and_malformed_files(tmp_path):
    with pytest.raises(ScenarioError, match="cannot read"):
        load_scenario(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text('{"name": "x",\n "duration": }', encoding="utf-8")
    with pytest.raises(ScenarioError) as err:
        load_scenario(bad)
    assert ":2:" in err.value.where


def test_every_bundled_scenario_loads():
    for p in sorted(SCENARIOS.glob("*.json")):
        assert load_scenario(p).name == p.stem


# --- trace ---------------------------------------------------------------------------

def test_trace_refuses_out_of_order_records():
    tr = Trace()
    tr.add(3, "guidance", "x")
    tr.add(3, "stabilization", "x")
    with pytest.raises(ContractViolation):
        tr.add(3, "perception", "x")
    with pytest.raises(ContractViolation):
        tr.add(2, "world", "x")


def test_run_trace_follows_scheduler_order():
    rank = {m: i for i, m in enumerate(MODULE_ORDER)}
    keys = [(r.tick, rank[r.module]) for r in run_named("goal_at_start").trace]
    assert keys == sorted(keys)


def test_trace_file_round_trip(tmp_path):
    res = run_named("goal_at_start")
    back = read_trace(res.trace.write(tmp_path / "t.jsonl"))
    assert [r.to_json() for r in back] == [r.to_json() for r in res.trace]


def test_malformed_trace_line_is_reported(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text('{"tick": 0, "module": "world", "kind": "state", "payload": {}}\n{"tick": oops}\n')
    with pytest.raises(ValueError, match=":2:"):
        read_trace(p)


# --- metrics ------------------------------------------------------------------------

def test_empty_trace_gives_zero_metrics():
    m = summarize_metrics([])
    assert m == empty_metrics()
    assert all(v in (0, 0.0, None, {}) for v in m.values())


def test_one_collision_record_counts_once():
    recs = [TraceRecord(5, "world", "collision", {"with": "agent/1"})]
    assert summarize_metrics(recs)["collisions"] == 1


@pytest.mark.parametrize("name", ["goal_at_start", "steering_failure", "v2x_phantom"])
def test_persisted_trace_folds_to_live_metrics(name, tmp_path):
    res = run_named(name)
    assert summarize_metrics(read_trace(res.trace.write(tmp_path / "t.jsonl"))) == res.metrics


def test_series_tracks_every_world_tick():
    s = summarize_metrics(run_named("goal_at_start").trace, series=True)["series"]
    assert len(s["tick"]) == len(s["offset"]) == len(s["speed"]) == len(s["escalations"])
    assert s["tick"] == sorted(s["tick"])


def assert_matches_golden(got, want, path="metrics"):
    if isinstance(want, dict):
        assert set(got) == set(want), path
        for k in want:
            assert_matches_golden(got[k], want[k], f"{path}.{k}")
    elif isinstance(want, list):
        assert len(got) == len(want), path
        for i, (g, w) in enumerate(zip(got, want)):
            assert_matches_golden(g, w, f"{path}[{i}]")
    elif isinstance(want, float):
        assert math.isclose(got, want, rel_tol=1e-9, abs_tol=1e-9), path
    else:
        assert got == want, path


def test_s1_metrics_match_golden_summary(update_golden):
    got = json.loads(json.dumps(run_named("s1_red_light").metrics))
    path = GOLDEN / "s1_red_light.metrics.json"
    if update_golden:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(got, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    assert path.is_file(), "golden summary missing; regenerate with --update-golden"
    assert_matches_golden(got, json.loads(path.read_text(encoding="utf-8")))


# --- scenarios and faults ------------------------------------------------------------

def test_goal_at_start_is_reached_at_tick_zero():
    m = run_named("goal_at_start").metrics
    assert m["goal_reached_tick"] == 0 and m["collisions"] == 0


def test_gnss_outage_grows_global_covariance():
    spec = load_scenario(scenario_path("regulation")).with_overrides(duration=260)
    spec = dataclasses.replace(spec, faults=(FaultSpec(FaultWindow("gnss_outage", "gnss", 100, 200), None),))
    res = run_closed_loop(spec)
    cov = [r.payload["global_cov_trace"] for r in res.trace
           if r.module == "localization" and r.kind == "pose" and 100 <= r.tick <= 200]
    assert len(cov) == 21
    assert all(b >= a for a, b in zip(cov, cov[1:]))
    assert cov[-1] > 10 * cov[0]


def test_steering_failure_stops_within_one_guidance_cycle():
    res = run_named("steering_failure")
    start = load_scenario(scenario_path("steering_failure")).faults[0].window.start
    esc = next(r for r in res.trace if r.module == "guidance" and r.kind == "escalation")
    stop = next(r for r in res.trace if r.module == "guidance" and r.kind == "decision"
                and r.payload["maneuver"] == "emergency_stop")
    assert esc.payload["escalation"] == "stop_system" and esc.payload["component"] == "steering"
    assert start < esc.tick <= start + GUIDANCE_EVERY
    assert stop.tick == esc.tick
    assert res.metrics["collisions"] == 0


def test_phantom_appears_only_as_v2x_only():
    res = run_named("v2x_phantom")
    confirmations = {d["confirmation"] for r in res.trace if r.module == "perception" and r.kind == "scene"
                     for d in r.payload["dynamic"] if d["id"] >= 1_000_000}
    assert confirmations == {"v2x_only"}
    assert res.metrics["emergency_stops"] == 0


# --- command line ----------------------------------------------------------------------

def test_cli_run_writes_trace_and_metrics(tmp_path, capsys):
    trace, metrics = tmp_path / "t.jsonl", tmp_path / "m.json"
    code = cli.main(["run", "--scenario", str(scenario_path("goal_at_start")), "--ticks", "30",
                     "--trace", str(trace), "--metrics", str(metrics)])
    assert code == cli.EXIT_OK
    m = json.loads(metrics.read_text())
    assert m["goal_reached_tick"] == 0
    assert cli.main(["replay-metrics", "--trace", str(trace)]) == cli.EXIT_OK
    assert json.loads(capsys.readouterr().out) == m


def test_cli_validate(capsys):
    assert cli.main(["validate", "--scenario", str(scenario_path("s1_red_light"))]) == cli.EXIT_OK
    assert "s1_red_light: ok" in capsys.readouterr().out


def test_cli_validation_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    maps = {k: str(SCENARIOS / v) for k, v in minimal()["maps"].items()}
    bad.write_text(json.dumps(minimal(maps=maps, hmi=[{"tick": 1, "level": "cosmic"}])))
    assert cli.main(["validate", "--scenario", str(bad)]) == cli.EXIT_INVALID
    assert "hmi[0].level" in capsys.readouterr().err
    assert cli.main(["replay-metrics", "--trace", str(tmp_path / "none.jsonl")]) == cli.EXIT_INVALID
    junk = tmp_path / "junk.jsonl"
    junk.write_text("not json\n")
    assert cli.main(["replay-metrics", "--trace", str(junk)]) == cli.EXIT_INVALID


def test_cli_contract_violation_exits_3(monkeypatch, capsys):
    def broken(spec, log_candidates=False):
        raise ContractViolation("target pose outside corridor", module="guidance", tick=42)

    monkeypatch.setattr(cli, "run_closed_loop", broken)
    assert cli.main(["run", "--scenario", str(scenario_path("goal_at_start"))]) == cli.EXIT_CONTRACT
    err = capsys.readouterr().err
    assert "guidance" in err and "tick 42" in err
