"""Self perception: component health with hysteresis, energy, skill limits."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from ..config import PerceptionParams
from ..core.geometry import Pose2D
from ..core.provenance import VEH
from ..core.types import Availability, Health, Maneuver, SelfRepresentation
from ..world.sensors import ProprioFrame

_SEVERITY = {Health.OK: 0, Health.DEGRADED: 1, Health.FAILED: 2}


@dataclass(frozen=True)
class ComponentTrack:
    flag: Health = Health.OK
    bad_run: int = 0
    fail_run: int = 0
    good_run: int = 0


def hysteresis_step(track: ComponentTrack, reading: Health, n_on: int = 3, n_off: int = 5) -> ComponentTrack:
    sev = _SEVERITY[reading]
    bad_run = track.bad_run + 1 if sev >= 1 else 0
    fail_run = track.fail_run + 1 if sev >= 2 else 0
    good_run = track.good_run + 1 if sev == 0 else 0
    flag = track.flag
    if fail_run >= n_on:
        flag = Health.FAILED
    elif bad_run >= n_on and flag == Health.OK:
        flag = Health.DEGRADED
    if good_run >= n_off:
        flag = Health.OK
    return ComponentTrack(flag, bad_run, fail_run, good_run)


@dataclass(frozen=True)
class SelfMonitorState:
    components: dict[str, ComponentTrack] = field(default_factory=dict)
    energy_history: tuple[tuple[int, float], ...] = ()


@dataclass(frozen=True)
class SelfMonitorRecord:
    tick: int
    component_health: dict[str, Health]
    energy_level: float
    energy_trend: float
    low_energy: bool
    newly_flagged: tuple[str, ...] = ()


def monitor_self(f: ProprioFrame, history: SelfMonitorState, params: Optional[PerceptionParams] = None,
                 dt: float = 0.01) -> tuple[SelfMonitorRecord, SelfMonitorState]:
    p = params or PerceptionParams()
    comps = dict(history.components)
    newly = []
    for name in sorted(f.component_health):
        before = comps.get(name, ComponentTrack())
        after = hysteresis_step(before, f.component_health[name], p.hysteresis_on, p.hysteresis_off)
        if _SEVERITY[after.flag] > _SEVERITY[before.flag]:
            newly.append(name)
        comps[name] = after
    hist = (history.energy_history + ((f.tick, f.energy_level),))[-20:]
    trend = 0.0
    if len(hist) >= 2 and hist[-1][0] != hist[0][0]:
        trend = (hist[-1][1] - hist[0][1]) / ((hist[-1][0] - hist[0][0]) * dt)
    record = SelfMonitorRecord(
        tick=f.tick,
        component_health={k: v.flag for k, v in sorted(comps.items())},
        energy_level=f.energy_level,
        energy_trend=trend,
        low_energy=f.energy_level < p.low_energy,
        newly_flagged=tuple(newly),
    )
    return record, SelfMonitorState(comps, hist)


def derive_skill_limits(health: dict[str, Health]) -> dict[Maneuver, Availability]:
    ok = {m: True for m in Maneuver}
    ok[Maneuver.FREE_SPACE_PARK] = False  # symbol reserved, not implemented
    steering = health.get("steering", Health.OK)
    if steering == Health.DEGRADED:
        ok[Maneuver.LANE_CHANGE_LEFT] = ok[Maneuver.LANE_CHANGE_RIGHT] = False
    if any(health.get(c, Health.OK) == Health.FAILED for c in ("steering", "brakes", "powertrain")):
        ok = {m: m == Maneuver.EMERGENCY_STOP for m in Maneuver}
    return {m: Availability.AVAILABLE if v else Availability.UNAVAILABLE for m, v in ok.items()}


def build_self_representation(pose: Pose2D, speed: float, delta: tuple[float, float, float],
                              record: SelfMonitorRecord) -> SelfRepresentation:
    return SelfRepresentation(
        pose=pose,
        velocity=speed,
        ego_motion_delta=delta,
        energy_level=min(max(record.energy_level, 0.0), 1.0),
        component_health=dict(record.component_health),
        skill_limits=derive_skill_limits(record.component_health),
        provenance=VEH,
    )


def failed_components(record: SelfMonitorRecord) -> list[str]:
    return [c for c, h in record.component_health.items() if h == Health.FAILED]
