"""Scenario files: parsing, defaults and cross-reference validation."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from ..communication import HmiCommand, HmiLevel
from ..config import StackConfig, apply_overrides
from ..core.codec import decode
from ..core.errors import CodecError
from ..core.types import LightColor, Maneuver, Mission
from ..localization.maps import MapStack, load_maps
from ..world.sensors import COMPONENTS, SensorConfig
from ..world.sim import Agent, FaultWindow, StaticObstacle, TrafficLight

SENSORS = ("extero", "proprio", "gnss", "yaw_rate")
FAULT_COMPONENTS = {
    "sensor_dropout": set(SENSORS),
    "component_degraded": set(COMPONENTS),
    "component_failed": set(COMPONENTS),
    "gnss_outage": {"gnss", "gnss_receiver"},
    "v2x_phantom": {"v2x"},
    "map_loop_injection": {"map"},
}


class ScenarioError(Exception):
    """Schema or cross-reference problem; ``where`` is a field path or file position."""

    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where
        self.message = message


@dataclass(frozen=True)
class EgoStart:
    x: float
    y: float
    heading: float = 0.0
    speed: float = 0.0


@dataclass(frozen=True)
class PhantomElement:
    """A scripted V2X object in the map frame."""

    x: float
    y: float
    heading: float = 0.0
    speed: float = 0.0
    length: float = 4.5
    width: float = 1.8
    remote_id: int = 1


@dataclass(frozen=True)
class ScriptedMessage:
    """A V2X message injected by a remote sender, optionally repeated."""

    tick: int
    sender: int
    kind: str
    elements: tuple[PhantomElement, ...] = ()
    sender_pose: Optional[tuple[float, float, float]] = None
    sender_speed: float = 0.0
    road_reports: tuple[dict, ...] = ()
    landmarks: tuple[dict, ...] = ()
    until: Optional[int] = None
    every: int = 10
    integrity: str = "untrusted"
    raw_body: Optional[str] = None

    def ticks(self, duration: int) -> range:
        end = self.tick if self.until is None else min(self.until, duration)
        return range(self.tick, end + 1, max(1, self.every))


@dataclass(frozen=True)
class FaultSpec:
    window: FaultWindow
    element: Optional[PhantomElement] = None


@dataclass(frozen=True)
class ChannelSpec:
    loss: float = 0.0
    delay: int = 2


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    seed: int
    duration: int
    map_files: dict[str, Path]
    maps: MapStack
    ego: EgoStart
    mission: Optional[Mission]
    agents: tuple[Agent, ...] = ()
    lights: tuple[TrafficLight, ...] = ()
    obstacles: tuple[StaticObstacle, ...] = ()
    sensors: SensorConfig = field(default_factory=SensorConfig)
    hmi: tuple[HmiCommand, ...] = ()
    v2x: tuple[ScriptedMessage, ...] = ()
    faults: tuple[FaultSpec, ...] = ()
    channel: ChannelSpec = field(default_factory=ChannelSpec)
    config: StackConfig = field(default_factory=StackConfig)
    energy_level: float = 1.0
    energy_per_meter: float = 0.0
    source: Optional[Path] = None

    def with_overrides(self, seed: Optional[int] = None, duration: Optional[int] = None) -> "ScenarioSpec":
        changes: dict[str, Any] = {}
        if seed is not None:
            changes["seed"] = int(seed)
        if duration is not None:
            if duration < 0:
                raise ScenarioError("ticks", "must be non-negative")
            changes["duration"] = int(duration)
        return dataclasses.replace(self, **changes) if changes else self


# --- parsing helpers -----------------------------------------------------------------

_MISSING = object()


def _get(d: dict, key: str, path: str, kind, default=_MISSING):
    where = f"{path}.{key}" if path else key
    if key not in d:
        if default is _MISSING:
            raise ScenarioError(where, "missing required field")
        return default
    v = d[key]
    if kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ScenarioError(where, f"expected a finite number, got {v!r}")
        return float(v)
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ScenarioError(where, f"expected an integer, got {v!r}")
        return v
    if not isinstance(v, kind):
        raise ScenarioError(where, f"expected {getattr(kind, '__name__', kind)}, got {type(v).__name__}")
    return v


def _point(v, where: str) -> tuple[float, float]:
    if not (isinstance(v, list) and len(v) == 2 and all(isinstance(c, (int, float)) and not isinstance(c, bool)
                                                        for c in v)):
        raise ScenarioError(where, "expected [x, y]")
    return (float(v[0]), float(v[1]))


def _check_keys(d: dict, allowed: set, path: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ScenarioError(path or "<root>", f"unknown field(s) {unknown}")


def _obj(v, where: str) -> dict:
    if not isinstance(v, dict):
        raise ScenarioError(where, "expected an object")
    return v


def _phantom(d: dict, where: str) -> PhantomElement:
    _obj(d, where)
    _check_keys(d, {f.name for f in dataclasses.fields(PhantomElement)}, where)
    return PhantomElement(
        _get(d, "x", where, float), _get(d, "y", where, float), _get(d, "heading", where, float, 0.0),
        _get(d, "speed", where, float, 0.0), _get(d, "length", where, float, 4.5),
        _get(d, "width", where, float, 1.8), _get(d, "remote_id", where, int, 1))


def _sorted_check(ticks: list[int], where: str) -> None:
    for i in range(1, len(ticks)):
        if ticks[i] < ticks[i - 1]:
            raise ScenarioError(f"{where}[{i}]", f"events must be sorted by tick ({ticks[i]} after {ticks[i - 1]})")


# --- loading ----------------------------------------------------------------------------

TOP_LEVEL = {"name", "seed", "duration", "maps", "ego", "mission", "agents", "lights", "obstacles", "sensors", "hmi",
             "v2x", "faults", "channel", "config", "energy", "description"}


def load_scenario(path: str | Path) -> ScenarioSpec:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(str(path), f"cannot read scenario: {exc.strerror or exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}", exc.msg) from None
    return parse_scenario(data, base=path.parent, source=path)


def parse_scenario(data: Any, base: Path = Path("."), source: Optional[Path] = None) -> ScenarioSpec:
    d = _obj(data, "<root>")
    _check_keys(d, TOP_LEVEL, "")
    name = _get(d, "name", "", str)
    seed = _get(d, "seed", "", int, 0)
    duration = _get(d, "duration", "", int)
    if duration < 0:
        raise ScenarioError("duration", "must be non-negative")

    maps_d = _obj(_get(d, "maps", "", dict), "maps")
    _check_keys(maps_d, {"roads", "lanes", "features"}, "maps")
    files = {}
    for level in ("roads", "lanes", "features"):
        rel = _get(maps_d, level, "maps", str, None if level == "features" else _MISSING)
        if rel is None:
            continue
        p = (base / rel).resolve()
        if not p.is_file():
            raise ScenarioError(f"maps.{level}", f"map file not found: {p}")
        files[level] = p
    try:
        maps = load_maps(files["roads"], files["lanes"], files.get("features"))
    except (CodecError, ValueError, KeyError) as exc:
        raise ScenarioError("maps", f"invalid map: {exc}") from None

    ego_d = _obj(_get(d, "ego", "", dict), "ego")
    _check_keys(ego_d, {"x", "y", "heading", "speed"}, "ego")
    ego = EgoStart(_get(ego_d, "x", "ego", float), _get(ego_d, "y", "ego", float),
                   _get(ego_d, "heading", "ego", float, 0.0), _get(ego_d, "speed", "ego", float, 0.0))
    if ego.speed < 0:
        raise ScenarioError("ego.speed", "must be non-negative")

    mission = None
    if "mission" in d and d["mission"] is not None:
        mission = _decode(Mission, d["mission"], "mission")
        for i, w in enumerate(mission.waypoints):
            if w not in maps.roads.node_by_id:
                raise ScenarioError(f"mission.waypoints[{i}]", f"unknown road node {w}")

    agents = []
    for i, a in enumerate(_get(d, "agents", "", list, [])):
        where = f"agents[{i}]"
        _obj(a, where)
        _check_keys(a, {"id", "schedule", "length", "width", "privacy", "heading"}, where)
        sched = []
        for j, row in enumerate(_get(a, "schedule", where, list)):
            if not (isinstance(row, list) and len(row) == 3 and isinstance(row[0], int)):
                raise ScenarioError(f"{where}.schedule[{j}]", "expected [tick, x, y]")
            sched.append((row[0], float(row[1]), float(row[2])))
        try:
            agents.append(Agent(_get(a, "id", where, int), tuple(sched), _get(a, "length", where, float, 4.5),
                                _get(a, "width", where, float, 1.8), _get(a, "privacy", where, bool, False),
                                _get(a, "heading", where, float, None)))
        except Exception as exc:
            raise ScenarioError(where, str(exc)) from None
    _unique([a.id for a in agents], "agents")

    lights = []
    signal_ids = {sl.signal_id for lane in maps.lanes.lanes for sl in lane.stop_lines if sl.signal_id is not None}
    for i, l in enumerate(_get(d, "lights", "", list, [])):
        where = f"lights[{i}]"
        _obj(l, where)
        _check_keys(l, {"id", "position", "phases"}, where)
        phases = []
        for j, ph in enumerate(_get(l, "phases", where, list)):
            if not (isinstance(ph, list) and len(ph) == 2 and isinstance(ph[0], int)):
                raise ScenarioError(f"{where}.phases[{j}]", "expected [tick, color]")
            try:
                phases.append((ph[0], LightColor(ph[1])))
            except ValueError:
                raise ScenarioError(f"{where}.phases[{j}]", f"unknown color {ph[1]!r}") from None
        _sorted_check([p[0] for p in phases], f"{where}.phases")
        lid = _get(l, "id", where, int)
        if lid not in signal_ids:
            raise ScenarioError(f"{where}.id", f"light {lid} governs no stop line in the lane map")
        lights.append(TrafficLight(lid, _point(_get(l, "position", where, list), f"{where}.position"), tuple(phases)))
    _unique([l.id for l in lights], "lights")

    obstacles = []
    for i, o in enumerate(_get(d, "obstacles", "", list, [])):
        where = f"obstacles[{i}]"
        _obj(o, where)
        _check_keys(o, {"id", "polygon"}, where)
        poly = tuple(_point(p, f"{where}.polygon[{j}]") for j, p in enumerate(_get(o, "polygon", where, list)))
        if len(poly) < 3:
            raise ScenarioError(f"{where}.polygon", "needs at least three vertices")
        obstacles.append(StaticObstacle(_get(o, "id", where, int), poly))
    _unique([o.id for o in obstacles], "obstacles")

    sensors = _decode(SensorConfig, d.get("sensors", {}), "sensors")

    hmi = []
    for i, h in enumerate(_get(d, "hmi", "", list, [])):
        where = f"hmi[{i}]"
        _obj(h, where)
        _check_keys(h, {"tick", "level", "mission", "maneuver", "setpoint"}, where)
        try:
            level = HmiLevel(_get(h, "level", where, str))
        except ValueError:
            raise ScenarioError(f"{where}.level", f"unknown level {h['level']!r}") from None
        cmd = HmiCommand(
            _get(h, "tick", where, int), level,
            _decode(Mission, h["mission"], f"{where}.mission") if "mission" in h else None,
            _decode(Maneuver, h["maneuver"], f"{where}.maneuver") if "maneuver" in h else None,
            _setpoint(h["setpoint"], f"{where}.setpoint") if "setpoint" in h else None,
        )
        hmi.append(cmd)
    _sorted_check([c.tick for c in hmi], "hmi")

    v2x = []
    for i, m in enumerate(_get(d, "v2x", "", list, [])):
        v2x.append(_scripted(m, f"v2x[{i}]"))
    _sorted_check([m.tick for m in v2x], "v2x")

    faults = []
    for i, f in enumerate(_get(d, "faults", "", list, [])):
        where = f"faults[{i}]"
        _obj(f, where)
        _check_keys(f, {"start", "end", "component", "mode", "element"}, where)
        mode = _get(f, "mode", where, str)
        comp = _get(f, "component", where, str)
        if mode not in FAULT_COMPONENTS:
            raise ScenarioError(f"{where}.mode", f"unknown fault mode {mode!r}")
        if comp not in FAULT_COMPONENTS[mode]:
            raise ScenarioError(f"{where}.component", f"unknown component {comp!r} for mode {mode}")
        start = _get(f, "start", where, int)
        end = _get(f, "end", where, int, None)
        if end is not None and end < start:
            raise ScenarioError(f"{where}.end", "must not precede start")
        element = None
        if mode == "v2x_phantom":
            element = _phantom(_get(f, "element", where, dict), f"{where}.element")
        faults.append(FaultSpec(FaultWindow(mode, comp, start, end), element))
    _sorted_check([f.window.start for f in faults], "faults")

    ch = _obj(d.get("channel", {}), "channel")
    _check_keys(ch, {"loss", "delay"}, "channel")
    channel = ChannelSpec(_get(ch, "loss", "channel", float, 0.0), _get(ch, "delay", "channel", int, 2))
    if not 0.0 <= channel.loss <= 1.0:
        raise ScenarioError("channel.loss", "must lie in [0, 1]")
    if channel.delay < 0:
        raise ScenarioError("channel.delay", "must be non-negative")

    try:
        config = apply_overrides(StackConfig(), _obj(d.get("config", {}), "config"))
    except KeyError as exc:
        raise ScenarioError(str(exc.args[0]), "unknown configuration key") from None
    except (TypeError, ValueError) as exc:
        raise ScenarioError("config", str(exc)) from None

    en = _obj(d.get("energy", {}), "energy")
    _check_keys(en, {"level", "per_meter"}, "energy")
    level = _get(en, "level", "energy", float, 1.0)
    if not 0.0 <= level <= 1.0:
        raise ScenarioError("energy.level", "must lie in [0, 1]")

    return ScenarioSpec(name, seed, duration, files, maps, ego, mission, tuple(agents), tuple(lights),
                        tuple(obstacles), sensors, tuple(hmi), tuple(v2x), tuple(faults), channel, config, level,
                        _get(en, "per_meter", "energy", float, 0.0), source)


def _decode(tp, data, where: str):
    try:
        return decode(tp, data, where)
    except CodecError as exc:
        raise ScenarioError(exc.path or where, str(exc).split(": ", 1)[-1]) from None


def _setpoint(v, where: str) -> tuple[str, float]:
    if not (isinstance(v, list) and len(v) == 2 and isinstance(v[0], str)
            and isinstance(v[1], (int, float)) and not isinstance(v[1], bool)):
        raise ScenarioError(where, "expected [name, value]")
    return (v[0], float(v[1]))


def _unique(ids: list[int], where: str) -> None:
    seen = set()
    for i, x in enumerate(ids):
        if x in seen:
            raise ScenarioError(f"{where}[{i}].id", f"duplicate id {x}")
        seen.add(x)


def _scripted(m: Any, where: str) -> ScriptedMessage:
    _obj(m, where)
    _check_keys(m, {"tick", "sender", "kind", "elements", "sender_pose", "sender_speed", "road_reports",
                    "landmarks", "until", "every", "integrity", "raw_body"}, where)
    kind = _get(m, "kind", where, str)
    if kind not in ("situation_extract", "road_state", "map_update"):
        raise ScenarioError(f"{where}.kind", f"unknown message kind {kind!r}")
    pose = m.get("sender_pose")
    if pose is not None:
        if not (isinstance(pose, list) and len(pose) == 3):
            raise ScenarioError(f"{where}.sender_pose", "expected [x, y, heading]")
        pose = tuple(float(c) for c in pose)
    elements = tuple(_phantom(e, f"{where}.elements[{j}]") for j, e in enumerate(_get(m, "elements", where, list, [])))
    reports = tuple(_get(m, "road_reports", where, list, []))
    for j, r in enumerate(reports):
        if not (isinstance(r, dict) and isinstance(r.get("edge_id"), int)
                and r.get("state") in ("free", "congested", "blocked")):
            raise ScenarioError(f"{where}.road_reports[{j}]", "expected {edge_id: int, state: free|congested|blocked}")
    integrity = _get(m, "integrity", where, str, "untrusted")
    if integrity not in ("trusted", "untrusted"):
        raise ScenarioError(f"{where}.integrity", f"unknown integrity {integrity!r}")
    sender = _get(m, "sender", where, int)
    if sender <= 0:
        raise ScenarioError(f"{where}.sender", "sender ids start at 1 (0 is the ego vehicle)")
    return ScriptedMessage(
        _get(m, "tick", where, int), sender, kind, elements, pose, _get(m, "sender_speed", where, float, 0.0),
        reports, tuple(_get(m, "landmarks", where, list, [])), _get(m, "until", where, int, None),
        _get(m, "every", where, int, 10), integrity, _get(m, "raw_body", where, str, None))
