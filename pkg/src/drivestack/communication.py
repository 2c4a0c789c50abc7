"""Communication column: scripted HMI commands and feedback, and a simulated V2X bus.

V2X content is never trusted like an onboard sensor. Received elements enter
as v2x_only with V2X in their provenance and only merge into an onboard
element that independently confirms them within the confirmation gate.
"""
from __future__ import annotations

import dataclasses
import enum
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .core import codec
from .core.errors import CodecError
from .core.geometry import Pose2D
from .core.provenance import V2X
from .core.types import Confirmation, DynamicElement, Maneuver, Mission, Purpose, RouteSet, Situation
from .localization.maps import FlowState, RoadReport

V2X_ID_BASE = 1_000_000
V2X_SENDER_STRIDE = 10_000
CONFIRM_GATE = 3.0


# --- HMI -------------------------------------------------------------------------

class HmiLevel(str, enum.Enum):
    STRATEGIC = "strategic"
    TACTICAL = "tactical"
    OPERATIONAL = "operational"


SETPOINTS = ("time_gap", "max_speed")


@dataclass(frozen=True)
class HmiCommand:
    tick: int
    level: HmiLevel
    mission: Optional[Mission] = None
    maneuver: Optional[Maneuver] = None
    setpoint: Optional[tuple[str, float]] = None


@dataclass(frozen=True)
class HmiDirective:
    """A command routed to the level that handles it."""

    target: str  # navigation | guidance | stabilization
    tick: int
    mission: Optional[Mission] = None
    maneuver: Optional[Maneuver] = None
    setpoint: Optional[tuple[str, float]] = None


def hmi_payload_errors(cmd: HmiCommand) -> list[str]:
    present = {"mission": cmd.mission is not None, "maneuver": cmd.maneuver is not None,
               "setpoint": cmd.setpoint is not None}
    want = {HmiLevel.STRATEGIC: "mission", HmiLevel.TACTICAL: "maneuver", HmiLevel.OPERATIONAL: "setpoint"}[cmd.level]
    out = []
    if not present[want]:
        out.append(f"{cmd.level.value} command needs a {want} payload")
    extra = [k for k, v in present.items() if v and k != want]
    if extra:
        out.append(f"{cmd.level.value} command carries unexpected payload {', '.join(extra)}")
    if cmd.setpoint is not None and cmd.setpoint[0] not in SETPOINTS:
        out.append(f"unknown setpoint {cmd.setpoint[0]!r}")
    if cmd.maneuver is not None and cmd.maneuver not in (Maneuver.LANE_CHANGE_LEFT, Maneuver.LANE_CHANGE_RIGHT):
        out.append(f"maneuver {cmd.maneuver.value} cannot be requested by the operator")
    return out


def ingest_hmi(cmd: HmiCommand) -> tuple[Optional[HmiDirective], list[str]]:
    """Route a command by level; a payload that does not match its level is rejected with a warning."""
    errors = hmi_payload_errors(cmd)
    if errors:
        return None, [f"hmi command at tick {cmd.tick} rejected: {e}" for e in errors]
    target = {HmiLevel.STRATEGIC: "navigation", HmiLevel.TACTICAL: "guidance",
              HmiLevel.OPERATIONAL: "stabilization"}[cmd.level]
    return HmiDirective(target, cmd.tick, cmd.mission, cmd.maneuver, cmd.setpoint), []


@dataclass(frozen=True)
class FeedbackRecord:
    tick: int
    kind: str  # routes | situation | warning
    payload: Any


def _route_signature(rs: Optional[RouteSet]) -> Optional[tuple]:
    if rs is None:
        return None
    return tuple((r.edges, round(r.cost, 9)) for r in rs.all_routes()) + (rs.version,)


def emit_hmi_feedback(tick: int, routes: Optional[RouteSet], situation: Optional[Situation], warnings: Sequence[str],
                      last_routes: Optional[RouteSet] = None) -> list[FeedbackRecord]:
    """Feedback for one guidance cycle; route alternatives only when they changed."""
    out = []
    if routes is not None and _route_signature(routes) != _route_signature(last_routes):
        out.append(FeedbackRecord(tick, "routes", {
            "version": routes.version,
            "routes": [{"edges": list(r.edges), "cost": r.cost} for r in routes.all_routes()],
        }))
    if situation is not None:
        out.append(FeedbackRecord(tick, "situation", {
            "relevant": len(situation.relevant_elements),
            "maneuver": situation.planned_maneuver.value if situation.planned_maneuver else None,
            "speed": situation.ego_velocity,
        }))
    for w in warnings:
        out.append(FeedbackRecord(tick, "warning", w))
    return out


# --- V2X -------------------------------------------------------------------------

class MessageKind(str, enum.Enum):
    SITUATION_EXTRACT = "situation_extract"
    MAP_UPDATE = "map_update"
    ROAD_STATE = "road_state"


class Integrity(str, enum.Enum):
    TRUSTED = "trusted"
    UNTRUSTED = "untrusted"


@dataclass(frozen=True)
class V2xMessage:
    sender: int
    tick: int
    kind: MessageKind
    body: str
    integrity: Integrity = Integrity.UNTRUSTED


@dataclass
class V2xBus:
    """In-process broadcast channel with independent per-delivery loss and a fixed delay.

    Each receiver has its own FIFO. Loss draws come from a counter-based
    stream keyed by (seed, sender, tick, sequence number, receiver), so
    delivery is a pure function of the seed and the send history.
    """

    loss: float = 0.0
    delay: int = 0
    seed: int = 0
    receivers: dict[int, deque] = field(default_factory=dict)
    sent: int = 0
    lost: int = 0

    def __post_init__(self):
        if not 0.0 <= self.loss <= 1.0:
            raise ValueError("loss probability must lie in [0, 1]")
        if self.delay < 0:
            raise ValueError("delay must be non-negative")

    def register(self, receiver: int) -> None:
        self.receivers.setdefault(receiver, deque())

    def _lost(self, msg: V2xMessage, receiver: int) -> bool:
        if self.loss <= 0.0:
            return False
        if self.loss >= 1.0:
            return True
        ss = np.random.SeedSequence([self.seed, 4, msg.sender, msg.tick, self.sent, receiver])
        return bool(np.random.Generator(np.random.Philox(ss)).random() < self.loss)

    def publish(self, msg: V2xMessage) -> int:
        """Enqueue for every receiver except the sender; returns the number of copies in flight."""
        n = 0
        for rid in sorted(self.receivers):
            if rid == msg.sender:
                continue
            if self._lost(msg, rid):
                self.lost += 1
                continue
            self.receivers[rid].append((msg.tick + self.delay, msg))
            n += 1
        self.sent += 1
        return n

    def deliver(self, receiver: int, tick: int) -> list[V2xMessage]:
        q = self.receivers.get(receiver)
        out = []
        while q and q[0][0] <= tick:
            out.append(q.popleft()[1])
        return out


def v2x_send(s: Situation, bus: V2xBus, sender: int, tick: int,
             integrity: Integrity = Integrity.TRUSTED) -> V2xMessage:
    if s.purpose != Purpose.V2X_BROADCAST:
        raise ValueError(f"only v2x_broadcast situations may be sent, got {s.purpose.value}")
    msg = V2xMessage(sender, tick, MessageKind.SITUATION_EXTRACT, codec.dumps(s), integrity)
    bus.publish(msg)
    return msg


def v2x_element_id(sender: int, remote_id: int) -> int:
    return V2X_ID_BASE + sender * V2X_SENDER_STRIDE + remote_id


@dataclass(frozen=True)
class ReceivedInputs:
    """Tagged V2X content, split by the module that consumes it."""

    elements: tuple[DynamicElement, ...] = ()  # local frame, for context modelling
    road_reports: tuple[RoadReport, ...] = ()  # for the road-state overlay
    landmarks: tuple[tuple[float, float, str], ...] = ()  # map frame, for the feature map
    dropped: int = 0


def v2x_receive(msgs: Sequence[V2xMessage], map_to_local: Pose2D, tick: int) -> ReceivedInputs:
    """Decode messages into tagged inputs; undecodable messages are dropped and counted.

    Situation extracts become v2x_only dynamic elements (the sender itself
    included) with V2X joined into their provenance, positions moved from
    the map frame into the local frame.
    """
    elements: list[DynamicElement] = []
    reports: list[RoadReport] = []
    marks: list[tuple[float, float, str]] = []
    dropped = 0
    for m in msgs:
        try:
            if m.kind == MessageKind.SITUATION_EXTRACT:
                sit = codec.loads(Situation, m.body)
                elements.extend(_remote_elements(m.sender, sit, map_to_local))
            elif m.kind == MessageKind.ROAD_STATE:
                for r in json.loads(m.body)["reports"]:
                    reports.append(RoadReport(int(r["edge_id"]), FlowState(r["state"]), tick, V2X,
                                              r.get("mean_speed")))
            elif m.kind == MessageKind.MAP_UPDATE:
                for lm in json.loads(m.body)["landmarks"]:
                    marks.append((float(lm["x"]), float(lm["y"]), str(lm.get("tag", "v2x"))))
            else:
                dropped += 1
        except (CodecError, ValueError, KeyError, TypeError):
            dropped += 1
    return ReceivedInputs(tuple(elements), tuple(reports), tuple(marks), dropped)


def _remote_elements(sender: int, sit: Situation, map_to_local: Pose2D) -> list[DynamicElement]:
    out = []
    if sit.ego_pose is not None:
        out.append(DynamicElement(
            v2x_element_id(sender, 0), map_to_local.compose(sit.ego_pose), float(sit.ego_velocity or 0.0), 0.0,
            (4.5, 1.8), ((1.0, 0.0), (0.0, 1.0)), V2X, Confirmation.V2X_ONLY))
    for e in sit.elements:
        out.append(dataclasses.replace(
            e, id=v2x_element_id(sender, e.id), pose=map_to_local.compose(e.pose), provenance=e.provenance | V2X,
            confirmation=Confirmation.V2X_ONLY, lane_assignment=None))
    return out


def merge_v2x(onboard: Sequence[DynamicElement], received: Sequence[DynamicElement], gate: float = CONFIRM_GATE
              ) -> tuple[list[DynamicElement], list[DynamicElement]]:
    """Confirm V2X elements against onboard ones.

    A received element within ``gate`` metres of an onboard-confirmed element
    is absorbed: the onboard element keeps its id and confirmation and joins
    V2X into its provenance. Everything else stays v2x_only. Each onboard
    element absorbs at most one received element (nearest first).
    """
    merged = list(onboard)
    pairs = []
    for j, r in enumerate(received):
        for i, o in enumerate(onboard):
            if o.confirmation != Confirmation.ONBOARD_CONFIRMED:
                continue
            d = math.hypot(o.pose.x - r.pose.x, o.pose.y - r.pose.y)
            if d <= gate:
                pairs.append((d, o.id, r.id, i, j))
    pairs.sort()
    used_o, used_r = set(), set()
    for _, _, _, i, j in pairs:
        if i in used_o or j in used_r:
            continue
        used_o.add(i)
        used_r.add(j)
        merged[i] = dataclasses.replace(merged[i], provenance=merged[i].provenance | received[j].provenance)
    remaining = [r for j, r in enumerate(received) if j not in used_r]
    return merged, remaining


def road_state_message(sender: int, tick: int, reports: Sequence[dict],
                       integrity: Integrity = Integrity.UNTRUSTED) -> V2xMessage:
    body = json.dumps({"reports": list(reports)}, sort_keys=True, separators=(",", ":"))
    return V2xMessage(sender, tick, MessageKind.ROAD_STATE, body, integrity)


def situation_message(sender: int, tick: int, ego_pose: Optional[Pose2D], ego_speed: float,
                      elements: Sequence[DynamicElement], integrity: Integrity = Integrity.UNTRUSTED) -> V2xMessage:
    """A scripted situation extract, as a remote vehicle would send it."""
    sit = Situation(tick, tick, tuple(e.id for e in elements), {}, None, Purpose.V2X_BROADCAST, tuple(elements),
                    ego_pose, ego_speed, None)
    return V2xMessage(sender, tick, MessageKind.SITUATION_EXTRACT, codec.dumps(sit), integrity)

