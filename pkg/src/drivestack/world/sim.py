"""Ground-truth world: kinematic bicycle ego, scripted agents and lights."""
from __future__ import annotations

import bisect
import dataclasses
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from ..config import VehicleParams
from ..core.errors import ContractViolation
from ..core.geometry import Point, Pose2D, footprints, rectangle
from ..core.types import Auxiliary, Health, LightColor
from ..localization.maps import FeatureMap, LaneMap

EGO_ID = 0


@dataclass(frozen=True)
class VehicleState:
    pose: Pose2D
    speed: float = 0.0
    steering_angle: float = 0.0
    wheelbase: float = 2.7

    def __post_init__(self):
        if self.speed < 0:
            raise ContractViolation("vehicle speed must be non-negative")


@dataclass(frozen=True)
class ActuatorCommand:
    steering_angle: float = 0.0
    acceleration: float = 0.0
    auxiliary: frozenset[Auxiliary] = frozenset()


@dataclass(frozen=True)
class Agent:
    """Scripted agent following a piecewise-linear (tick, x, y) schedule."""

    id: int
    schedule: tuple[tuple[int, float, float], ...]
    length: float = 4.5
    width: float = 1.8
    privacy: bool = False
    heading: Optional[float] = None

    def __post_init__(self):
        if self.id == EGO_ID:
            raise ContractViolation("agent id 0 is reserved for the ego vehicle")
        ticks = [p[0] for p in self.schedule]
        if not ticks or ticks != sorted(ticks):
            raise ContractViolation(f"agent {self.id}: schedule must be non-empty and sorted")

    @cached_property
    def _ticks(self) -> list[int]:
        return [p[0] for p in self.schedule]

    def state_at(self, tick: int, dt: float) -> tuple[float, float, float, float]:
        """(x, y, heading, speed) at a tick; holds the end points outside the schedule."""
        sch = self.schedule
        i = bisect.bisect_right(self._ticks, tick) - 1
        if i < 0:
            i = 0
        if i >= len(sch) - 1:
            t0, x0, y0 = sch[-1]
            return x0, y0, self._rest_heading(len(sch) - 1), 0.0
        (t0, x0, y0), (t1, x1, y1) = sch[i], sch[i + 1]
        if tick < t0:
            return x0, y0, self._rest_heading(0), 0.0
        f = (tick - t0) / (t1 - t0)
        dx, dy = x1 - x0, y1 - y0
        dist = math.hypot(dx, dy)
        if dist < 1e-9:
            return x0, y0, self._rest_heading(i), 0.0
        return x0 + f * dx, y0 + f * dy, math.atan2(dy, dx), dist / ((t1 - t0) * dt)

    def _rest_heading(self, i: int) -> float:
        if self.heading is not None:
            return self.heading
        sch = self.schedule
        for j in range(min(i, len(sch) - 2), -1, -1):
            dx, dy = sch[j + 1][1] - sch[j][1], sch[j + 1][2] - sch[j][2]
            if math.hypot(dx, dy) > 1e-9:
                return math.atan2(dy, dx)
        for j in range(i, len(sch) - 1):
            dx, dy = sch[j + 1][1] - sch[j][1], sch[j + 1][2] - sch[j][2]
            if math.hypot(dx, dy) > 1e-9:
                return math.atan2(dy, dx)
        return 0.0

    def polygon_at(self, tick: int, dt: float) -> np.ndarray:
        x, y, h, _ = self.state_at(tick, dt)
        return rectangle(x, y, h, self.length, self.width)


@dataclass(frozen=True)
class TrafficLight:
    id: int
    position: Point
    phases: tuple[tuple[int, LightColor], ...]

    def color_at(self, tick: int) -> LightColor:
        color = LightColor.UNKNOWN
        for t, c in self.phases:
            if t <= tick:
                color = c
            else:
                break
        return color


@dataclass(frozen=True)
class StaticObstacle:
    id: int
    polygon: tuple[Point, ...]


@dataclass(frozen=True)
class FaultWindow:
    mode: str
    component: str
    start: int
    end: Optional[int] = None

    def active(self, tick: int) -> bool:
        return self.start <= tick and (self.end is None or tick <= self.end)


@dataclass(frozen=True)
class GroundTruthWorld:
    tick: int
    ego: VehicleState
    agents: tuple[Agent, ...] = ()
    lights: tuple[TrafficLight, ...] = ()
    static_obstacles: tuple[StaticObstacle, ...] = ()
    geometry_source: Optional[LaneMap] = None
    landmarks: FeatureMap = field(default_factory=FeatureMap)
    faults: tuple[FaultWindow, ...] = ()
    energy_level: float = 1.0
    energy_per_meter: float = 0.0
    dt: float = 0.01
    vehicle: VehicleParams = field(default_factory=VehicleParams)

    def health_at(self, component: str, tick: Optional[int] = None) -> Health:
        tick = self.tick if tick is None else tick
        status = Health.OK
        for f in self.faults:
            if f.component == component and f.active(tick):
                if f.mode == "component_failed":
                    return Health.FAILED
                if f.mode == "component_degraded":
                    status = Health.DEGRADED
        return status

    def fault_active(self, mode: str, component: Optional[str] = None, tick: Optional[int] = None) -> bool:
        tick = self.tick if tick is None else tick
        return any(f.mode == mode and (component is None or f.component == component) and f.active(tick)
                   for f in self.faults)

    def ego_footprint(self) -> np.ndarray:
        p = self.ego.pose
        v = self.vehicle
        return footprints(np.array(p.x), np.array(p.y), np.array(p.heading), v.length, v.width, v.rear_overhang)

    def lane_offset(self) -> Optional[float]:
        """Signed lateral offset of the ego reference point from the nearest lane centerline."""
        if self.geometry_source is None or not self.geometry_source.lanes:
            return None
        ds = [l.polyline.project(self.ego.pose.x, self.ego.pose.y)[1] for l in self.geometry_source.lanes]
        return float(min(ds, key=abs))

    def obstacle_polygons(self, exclude_agent: Optional[int] = None) -> list[tuple[str, np.ndarray]]:
        out = [(f"agent/{a.id}", a.polygon_at(self.tick, self.dt)) for a in self.agents if a.id != exclude_agent]
        out += [(f"static/{s.id}", np.asarray(s.polygon, dtype=float)) for s in self.static_obstacles]
        return out


@dataclass(frozen=True)
class StepResult:
    world: GroundTruthWorld
    saturated: bool


def saturate(cmd: ActuatorCommand, limits: VehicleParams) -> tuple[ActuatorCommand, bool]:
    steer = min(max(cmd.steering_angle, -limits.max_steer), limits.max_steer)
    acc = min(max(cmd.acceleration, -limits.max_decel), limits.max_accel)
    changed = steer != cmd.steering_angle or acc != cmd.acceleration
    return dataclasses.replace(cmd, steering_angle=steer, acceleration=acc), changed


def integrate_bicycle(state: VehicleState, steering: float, accel: float, dt: float) -> VehicleState:
    """Exact integration for inputs held constant over the step.

    With steering fixed the path is a circle of curvature tan(delta)/L whatever
    the speed profile, so only the travelled distance depends on acceleration.
    Speed is clamped at zero (no reverse).
    """
    v0 = state.speed
    if accel < 0 and v0 + accel * dt < 0:
        t_stop = v0 / -accel
        ds = v0 * t_stop + 0.5 * accel * t_stop * t_stop
        v1 = 0.0
    else:
        ds = v0 * dt + 0.5 * accel * dt * dt
        v1 = v0 + accel * dt
    kappa = math.tan(steering) / state.wheelbase
    th0 = state.pose.heading
    dth = kappa * ds
    if abs(dth) < 1e-12:
        dx, dy = ds * math.cos(th0), ds * math.sin(th0)
    else:
        dx = (math.sin(th0 + dth) - math.sin(th0)) / kappa
        dy = (math.cos(th0) - math.cos(th0 + dth)) / kappa
    pose = Pose2D(state.pose.x + dx, state.pose.y + dy, th0 + dth)
    return VehicleState(pose, max(v1, 0.0), steering, state.wheelbase)


def step_world(world: GroundTruthWorld, cmd: ActuatorCommand, dt: Optional[float] = None) -> StepResult:
    dt = world.dt if dt is None else dt
    if not dt > 0:
        raise ContractViolation("step_world requires dt > 0")
    applied, saturated = saturate(cmd, world.vehicle)
    ego = integrate_bicycle(world.ego, applied.steering_angle, applied.acceleration, dt)
    travelled = world.ego.pose.distance_to(ego.pose)
    energy = max(0.0, world.energy_level - world.energy_per_meter * travelled)
    nxt = dataclasses.replace(world, tick=world.tick + 1, ego=ego, energy_level=energy)
    return StepResult(nxt, saturated)


def ego_collisions(world: GroundTruthWorld) -> list[str]:
    """Ids of ground-truth obstacles overlapping the ego footprint."""
    from ..core.geometry import convex_overlap

    fp = world.ego_footprint()
    lo, hi = fp.min(axis=0), fp.max(axis=0)
    hits = []
    for name, poly in world.obstacle_polygons():
        poly = np.asarray(poly, dtype=float)
        if np.any(poly.max(axis=0) < lo) or np.any(poly.min(axis=0) > hi):
            continue  # bounding boxes apart
        if bool(convex_overlap(fp, poly)):
            hits.append(name)
    return hits
