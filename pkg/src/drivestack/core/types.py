"""Data contracts exchanged between modules.

All records are frozen dataclasses. Mapping-valued fields are plain dicts and
are treated as read-only once a record is published.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import ContractViolation
from .geometry import Point, Pose2D, point_in_convex
from .provenance import ProvenanceMask

ElementId = Union[int, str]
EGO_ID = 0


class Maneuver(str, enum.Enum):
    FOLLOW_LANE = "follow_lane"
    FOLLOW_VEHICLE = "follow_vehicle"
    LANE_CHANGE_LEFT = "lane_change_left"
    LANE_CHANGE_RIGHT = "lane_change_right"
    STOP_AT_POINT = "stop_at_point"
    FREE_SPACE_PARK = "free_space_park"
    EMERGENCY_STOP = "emergency_stop"


class Confirmation(str, enum.Enum):
    ONBOARD_CONFIRMED = "onboard_confirmed"
    V2X_ONLY = "v2x_only"


class Health(str, enum.Enum):
    OK = "ok"
    DEGRADED = "degraded"
    FAILED = "failed"


class Availability(str, enum.Enum):
    AVAILABLE = "available"
    UNAVAILABLE = "unavailable"


class SceneryKind(str, enum.Enum):
    LANE = "lane"
    ROAD = "road"
    STOP_LINE = "stop_line"
    TRAFFIC_LIGHT = "traffic_light"
    TRAFFIC_SIGN = "traffic_sign"
    STATIC_OBSTACLE = "static_obstacle"
    LANDMARK = "landmark"


class LightColor(str, enum.Enum):
    RED = "red"
    YELLOW = "yellow"
    GREEN = "green"
    UNKNOWN = "unknown"


class Purpose(str, enum.Enum):
    EGO_PLANNING = "ego_planning"
    V2X_BROADCAST = "v2x_broadcast"
    HMI_DISPLAY = "hmi_display"


class Criterion(str, enum.Enum):
    SHORTEST_DISTANCE = "shortest_distance"
    SHORTEST_TIME = "shortest_time"
    MAX_COMFORT = "max_comfort"


class Status(str, enum.Enum):
    NOMINAL = "nominal"
    DEGRADED = "degraded"
    FAILED = "failed"


class Reason(str, enum.Enum):
    NONE = "none"
    NO_COLLISION_FREE_TRAJECTORY = "no_collision_free_trajectory"
    CONTROL_DEVIATION_EXCEEDED = "control_deviation_exceeded"
    SKILL_LIMITED = "skill_limited"
    COMPONENT_FAILED = "component_failed"
    LINKED_ELEMENT_LOST = "linked_element_lost"


class Escalation(str, enum.Enum):
    NONE = "none"
    REPLAN_BEHAVIOR = "replan_behavior"
    REPLAN_ROUTE = "replan_route"
    STOP_SYSTEM = "stop_system"


class Auxiliary(str, enum.Enum):
    INDICATOR_LEFT = "indicator_left"
    INDICATOR_RIGHT = "indicator_right"
    HORN = "horn"
    LIGHTS = "lights"
    WIPERS = "wipers"


class Classification(str, enum.Enum):
    VEHICLE_LIKE = "vehicle_like"
    UNKNOWN = "unknown"


# --- scene -----------------------------------------------------------------

@dataclass(frozen=True)
class DynamicElement:
    id: int
    pose: Pose2D
    velocity: float
    yaw_rate: float
    extent: tuple[float, float]
    state_covariance: tuple[tuple[float, float], tuple[float, float]]
    provenance: ProvenanceMask
    confirmation: Confirmation = Confirmation.ONBOARD_CONFIRMED
    lane_assignment: Optional[int] = None
    classification: Classification = Classification.VEHICLE_LIKE
    privacy: bool = False

    def __post_init__(self):
        if self.extent[0] <= 0 or self.extent[1] <= 0:
            raise ContractViolation(f"element {self.id}: extent must be positive")
        cov = np.asarray(self.state_covariance, dtype=float)
        if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() < -1e-9:
            raise ContractViolation(f"element {self.id}: covariance not symmetric PSD")

    @property
    def vx(self) -> float:
        return self.velocity * math.cos(self.pose.heading)

    @property
    def vy(self) -> float:
        return self.velocity * math.sin(self.pose.heading)


@dataclass(frozen=True)
class StopLineRef:
    id: int
    position: Point
    signal_id: Optional[int] = None


@dataclass(frozen=True)
class SceneryElement:
    """A stationary scene entry; which optional fields are set depends on kind."""

    id: str
    kind: SceneryKind
    geometry: tuple[Point, ...]
    provenance: ProvenanceMask
    width: Optional[float] = None
    road_id: Optional[int] = None
    lane_id: Optional[int] = None
    left_id: Optional[int] = None
    right_id: Optional[int] = None
    successors: tuple[int, ...] = ()
    speed_limit: Optional[float] = None
    signal_id: Optional[int] = None
    light_state: Optional[LightColor] = None
    confidence: Optional[float] = None
    tag: Optional[str] = None
    privacy: bool = False


@dataclass(frozen=True)
class SelfRepresentation:
    pose: Pose2D
    velocity: float
    ego_motion_delta: tuple[float, float, float]
    energy_level: float
    component_health: dict[str, Health]
    skill_limits: dict[Maneuver, Availability]
    provenance: ProvenanceMask

    def __post_init__(self):
        if not 0.0 <= self.energy_level <= 1.0:
            raise ContractViolation(f"energy level {self.energy_level} outside [0, 1]")
        missing = [m for m in Maneuver if m not in self.skill_limits]
        if missing:
            raise ContractViolation(f"skill_limits missing {[m.value for m in missing]}")

    def can(self, maneuver: Maneuver) -> bool:
        return self.skill_limits.get(maneuver) == Availability.AVAILABLE


@dataclass(frozen=True)
class Scenery:
    tick: int
    elements: tuple[SceneryElement, ...]
    extended: bool


@dataclass(frozen=True)
class DynamicEnvironment:
    tick: int
    elements: tuple[DynamicElement, ...]


@dataclass(frozen=True)
class Scene:
    tick: int
    scenery: tuple[SceneryElement, ...]
    dynamic_elements: tuple[DynamicElement, ...]
    self_rep: SelfRepresentation
    extended: bool

    def element_ids(self) -> list[ElementId]:
        return [e.id for e in self.scenery] + [e.id for e in self.dynamic_elements]

    def lanes(self) -> list[SceneryElement]:
        return [e for e in self.scenery if e.kind == SceneryKind.LANE]

    def by_kind(self, kind: SceneryKind) -> list[SceneryElement]:
        return [e for e in self.scenery if e.kind == kind]

    def dynamic(self, element_id: int) -> Optional[DynamicElement]:
        for e in self.dynamic_elements:
            if e.id == element_id:
                return e
        return None


# --- situation -------------------------------------------------------------

@dataclass(frozen=True)
class Assessment:
    subject: ElementId
    score: Optional[float] = None
    flag: Optional[bool] = None
    value: Optional[float] = None


@dataclass(frozen=True)
class RouteContext:
    route_version: int
    edges: tuple[int, ...]
    current_edge: Optional[int]
    next_action_distance: float


@dataclass(frozen=True)
class Situation:
    tick: int
    base_scene_tick: int
    relevant_elements: tuple[ElementId, ...]
    assessments: dict[str, Assessment]
    route_context: Optional[RouteContext]
    purpose: Purpose
    # payload carried when the situation leaves the vehicle or is displayed
    elements: tuple[DynamicElement, ...] = ()
    ego_pose: Optional[Pose2D] = None
    ego_velocity: Optional[float] = None
    planned_maneuver: Optional[Maneuver] = None


# --- guidance -> stabilization ---------------------------------------------

@dataclass(frozen=True)
class SamplingRanges:
    lateral: float = 1.0
    temporal: float = 1.0
    nominal_time: float = 3.0


@dataclass(frozen=True)
class DeviationCosts:
    lateral: float = 1.0
    speed: float = 1.0
    time: float = 0.0


@dataclass(frozen=True)
class LinkedState:
    x: float
    y: float
    speed: float
    heading: float
    tick: int


@dataclass(frozen=True)
class TargetPose:
    pose: Pose2D
    target_speed: float
    corridor: tuple[tuple[Point, ...], ...]
    reference_line: tuple[Point, ...]
    maneuver: Maneuver
    sampling_ranges: SamplingRanges = field(default_factory=SamplingRanges)
    deviation_costs: DeviationCosts = field(default_factory=DeviationCosts)
    linked_element: Optional[int] = None
    linked_state: Optional[LinkedState] = None
    follow_gap: Optional[float] = None
    speed_cap: Optional[float] = None

    def __post_init__(self):
        for msg in target_pose_violations(self):
            raise ContractViolation(msg)

    def corridor_contains(self, x: float, y: float) -> bool:
        return any(bool(point_in_convex(np.asarray(p), x, y, tol=1e-6)) for p in self.corridor)


def target_pose_violations(tp: TargetPose) -> list[str]:
    out = []
    if not tp.target_speed >= 0:
        out.append(f"target_speed {tp.target_speed} < 0")
    linked = tp.linked_element is not None
    if linked != (tp.maneuver == Maneuver.FOLLOW_VEHICLE):
        out.append("linked_element must be present iff maneuver is follow_vehicle")
    if not tp.corridor:
        out.append("empty corridor")
    elif not tp.corridor_contains(tp.pose.x, tp.pose.y):
        out.append(f"target pose ({tp.pose.x:.2f}, {tp.pose.y:.2f}) outside corridor")
    if len(tp.reference_line) < 2:
        out.append("reference line needs two points")
    return out


# --- navigation ------------------------------------------------------------

@dataclass(frozen=True)
class Route:
    edges: tuple[int, ...]
    cost: float


@dataclass(frozen=True)
class RouteSet:
    best: Route
    alternatives: tuple[Route, ...] = ()
    version: int = 0

    def __post_init__(self):
        for alt in self.alternatives:
            if alt.cost < self.best.cost:
                raise ContractViolation("best route must have minimal cost")

    def all_routes(self) -> tuple[Route, ...]:
        return (self.best,) + self.alternatives


@dataclass(frozen=True)
class Mission:
    waypoints: tuple[int, ...]
    criterion: Criterion = Criterion.SHORTEST_TIME

    def __post_init__(self):
        if not self.waypoints:
            raise ContractViolation("mission needs at least one waypoint")


# --- monitoring ------------------------------------------------------------

@dataclass(frozen=True)
class ExecutionReport:
    source: str
    tick: int
    status: Status
    reason: Reason = Reason.NONE
    escalation: Escalation = Escalation.NONE
    edge_id: Optional[int] = None
    location: Optional[Point] = None
    component: Optional[str] = None

    def __post_init__(self):
        if self.status == Status.NOMINAL and self.reason != Reason.NONE:
            raise ContractViolation("nominal report must carry reason none")


def nominal(source: str, tick: int) -> ExecutionReport:
    return ExecutionReport(source=source, tick=tick, status=Status.NOMINAL)
