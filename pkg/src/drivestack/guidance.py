"""Tactical level: situation extraction and assessment, rule-cascade behaviour
planning, execution monitoring and the V2X situation extract.

Everything here works in the local stationary frame of the scene it is given.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import shapely

from .config import GuidanceParams, VehicleParams
from .core.geometry import Point, Polyline, Pose2D, corridor_polygons, rectangle
from .core.provenance import MAP
from .core.types import (EGO_ID, Assessment, Auxiliary, Confirmation, DynamicElement, ElementId, Escalation,
                         ExecutionReport, LightColor, LinkedState, Maneuver, Purpose, Reason, RouteContext, RouteSet,
                         SamplingRanges, Scene, SceneryElement, SceneryKind, Situation, Status, TargetPose)


# --- route geometry ----------------------------------------------------------

@dataclass(frozen=True)
class LaneSpan:
    lane_id: int
    road_id: Optional[int]
    s0: float
    s1: float
    width: float
    speed_limit: Optional[float]
    left_id: Optional[int] = None
    right_id: Optional[int] = None


@dataclass(frozen=True, eq=False)
class RouteReference:
    """Centerline chain of the lanes the ego will drive, starting at its current lane."""

    line: Polyline
    spans: tuple[LaneSpan, ...]
    ego_s: float
    ego_d: float

    def span_at(self, s: float) -> LaneSpan:
        for sp in self.spans:
            if s < sp.s1:
                return sp
        return self.spans[-1]

    @property
    def current(self) -> LaneSpan:
        return self.spans[0]

    def lane_ids(self) -> set[int]:
        return {sp.lane_id for sp in self.spans}


def _lane_elements(scene: Scene) -> dict[int, SceneryElement]:
    return {e.lane_id: e for e in scene.scenery
            if e.kind == SceneryKind.LANE and e.lane_id is not None and len(e.geometry) >= 2}


def _polyline(e: SceneryElement) -> Optional[Polyline]:
    try:
        return Polyline(e.geometry)
    except ValueError:
        return None


def build_route_reference(scene: Scene, route_edges: Sequence[int], pose: Pose2D,
                          min_ahead: float = 160.0) -> Optional[RouteReference]:
    lanes = _lane_elements(scene)
    if not lanes:
        return None
    order = {e: i for i, e in enumerate(route_edges)}
    lines = {lid: _polyline(e) for lid, e in lanes.items()}
    best = None
    for lid, e in lanes.items():
        line = lines[lid]
        if line is None:
            continue
        s, d = line.project(pose.x, pose.y)
        w = e.width or 3.5
        if s < -1.0 or s > line.length + 1.0 or abs(d) > w:
            continue
        on_route = e.road_id in order
        key = (bool(route_edges) and not on_route, not (0.0 <= s <= line.length), abs(d) > w / 2,
               order.get(e.road_id, 0), abs(d), lid)
        if best is None or key < best[0]:
            best = (key, lid)
    if best is None:
        return None
    chain = [best[1]]
    ahead = lines[best[1]].length - lines[best[1]].project(pose.x, pose.y)[0]
    while ahead < min_ahead:
        cur = lanes[chain[-1]]
        succ = [lanes[s] for s in cur.successors if s in lanes and s not in chain and lines.get(s) is not None]
        if not succ:
            break
        pick = None
        if route_edges and cur.road_id in order:
            idx = order[cur.road_id]
            for want in (cur.road_id, route_edges[idx + 1] if idx + 1 < len(route_edges) else None):
                cands = [e for e in succ if e.road_id == want]
                if cands:
                    pick = min(cands, key=lambda e: e.lane_id)
                    break
        if pick is None:
            if route_edges:
                break
            # without a route keep the straightest continuation
            h_end = float(lines[cur.lane_id].heading_at(lines[cur.lane_id].length))
            pick = min(succ, key=lambda e: (abs(math.remainder(float(lines[e.lane_id].heading_at(0.0)) - h_end,
                                                                  2 * math.pi)), e.lane_id))
        chain.append(pick.lane_id)
        ahead += lines[pick.lane_id].length
    pts: list[np.ndarray] = []
    spans = []
    for lid in chain:
        p = lines[lid].points
        if pts and np.hypot(*(pts[-1][-1] - p[0])) < 1e-6:
            p = p[1:]
        pts.append(p)
        e = lanes[lid]
        spans.append([lid, e.road_id, e.width or 3.5, e.speed_limit, e.left_id, e.right_id])
    line = Polyline(np.concatenate(pts))
    # lane boundaries along the chained line
    bounds = []
    for lid in chain:
        L = lines[lid]
        s_end, _ = line.project(*L.points[-1])
        bounds.append(s_end)
    out_spans = []
    for i, (lid, road, w, lim, left, right) in enumerate(spans):
        a = 0.0 if i == 0 else bounds[i - 1]
        b = bounds[i] if i < len(chain) - 1 else math.inf
        out_spans.append(LaneSpan(lid, road, a, b, w, lim, left, right))
    s, d = line.project(pose.x, pose.y)
    return RouteReference(line, tuple(out_spans), s, d)


# --- situation -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GuidanceContext:
    """Geometry shared by the guidance steps of one cycle."""

    scene: Scene
    reference: Optional[RouteReference]
    goal: Optional[Point]
    vehicle: VehicleParams = field(default_factory=VehicleParams)

    @property
    def ego_pose(self) -> Pose2D:
        return self.scene.self_rep.pose

    @property
    def ego_speed(self) -> float:
        return self.scene.self_rep.velocity


def _element_xy(e) -> Point:
    if isinstance(e, DynamicElement):
        return (e.pose.x, e.pose.y)
    g = np.asarray(e.geometry, dtype=float).reshape(-1, 2)
    c = g.mean(axis=0)
    return (float(c[0]), float(c[1]))


def extract_situation(scene: Scene, routes: Optional[RouteSet], purpose: Purpose,
                      current_edge: Optional[int] = None, goal: Optional[Point] = None,
                      params: Optional[GuidanceParams] = None, vehicle: Optional[VehicleParams] = None,
                      tick: Optional[int] = None) -> tuple[Situation, GuidanceContext]:
    """Relevant extract of a scene along the active route.

    Elements within the window (ahead/behind along the route reference line,
    inside the lateral band) are kept, together with the route lanes, their
    neighbours and every signal governing a stop line on the route. A
    broadcast extract drops privacy-flagged entries.
    """
    p = params or GuidanceParams()
    vehicle = vehicle or VehicleParams()
    route_edges = routes.best.edges if routes is not None else ()
    ref = build_route_reference(scene, route_edges, scene.self_rep.pose)
    ctx = GuidanceContext(scene, ref, goal, vehicle)
    relevant: list[ElementId] = []
    if ref is not None:
        lane_ids = ref.lane_ids()
        neighbours = {x for sp in ref.spans for x in (sp.left_id, sp.right_id) if x is not None}
        stop_signals = set()
        for e in scene.scenery:
            if e.kind == SceneryKind.STOP_LINE and e.signal_id is not None:
                s, d = ref.line.project(*e.geometry[0])
                if e.lane_id in lane_ids or (s >= ref.ego_s - p.behind and abs(d) <= p.lateral_band):
                    stop_signals.add(e.signal_id)
        for e in scene.scenery:
            if purpose == Purpose.V2X_BROADCAST and e.privacy:
                continue
            if e.kind == SceneryKind.LANE:
                keep = e.lane_id in lane_ids or e.lane_id in neighbours
            elif e.kind == SceneryKind.TRAFFIC_LIGHT and e.signal_id in stop_signals:
                keep = True
            else:
                keep = _in_window(ref, _element_xy(e), p)
            if keep:
                relevant.append(e.id)
        for d_el in scene.dynamic_elements:
            if purpose == Purpose.V2X_BROADCAST and d_el.privacy:
                continue
            if _in_window(ref, _element_xy(d_el), p):
                relevant.append(d_el.id)
    else:
        # no lane context: keep what is near the ego
        ex, ey = scene.self_rep.pose.xy
        for e in list(scene.scenery) + list(scene.dynamic_elements):
            if purpose == Purpose.V2X_BROADCAST and e.privacy:
                continue
            x, y = _element_xy(e)
            if math.hypot(x - ex, y - ey) <= p.ahead:
                relevant.append(e.id)
    route_ctx = None
    if routes is not None and ref is not None:
        cur = current_edge if current_edge is not None else ref.current.road_id
        end_of_edge = next((sp.s1 for sp in ref.spans if sp.road_id == cur and math.isfinite(sp.s1)), None)
        nad = max(0.0, end_of_edge - ref.ego_s) if end_of_edge is not None else math.inf
        route_ctx = RouteContext(routes.version, routes.best.edges, cur, nad)
    sit = Situation(
        tick=scene.tick if tick is None else tick,
        base_scene_tick=scene.tick,
        relevant_elements=tuple(relevant),
        assessments={},
        route_context=route_ctx,
        purpose=purpose,
        ego_pose=scene.self_rep.pose,
        ego_velocity=scene.self_rep.velocity,
    )
    return sit, ctx


def _in_window(ref: RouteReference, xy: Point, p: GuidanceParams) -> bool:
    s, d = ref.line.project(*xy)
    return ref.ego_s - p.behind <= s <= ref.ego_s + p.ahead and abs(d) <= p.lateral_band


# --- assessment ----------------------------------------------------------------

def gap_quality(front_gap: float, rear_gap: float, speed: float, t_gap_min: float) -> float:
    gap = min(front_gap, rear_gap)
    need = speed * t_gap_min
    if need <= 1e-9:
        return 1.0 if gap > 0 else 0.0
    return float(min(1.0, max(0.0, gap / need)))


@dataclass(frozen=True)
class _Placed:
    element: DynamicElement
    s: float
    d: float


def _placed(ctx: GuidanceContext, relevant: set) -> list[_Placed]:
    if ctx.reference is None:
        return []
    out = []
    for e in ctx.scene.dynamic_elements:
        if e.id not in relevant:
            continue
        s, d = ctx.reference.line.project(e.pose.x, e.pose.y)
        out.append(_Placed(e, s, d))
    return out


def _lane_gaps(ctx: GuidanceContext, lane_id: int, placed: list[_Placed]) -> tuple[float, float]:
    lanes = _lane_elements(ctx.scene)
    e = lanes.get(lane_id)
    line = _polyline(e) if e is not None else None
    if line is None:
        return math.inf, math.inf
    w = e.width or 3.5
    v = ctx.vehicle
    s_ego = ctx.reference.ego_s
    front, rear = math.inf, math.inf
    for pl in placed:
        if pl.element.confirmation != Confirmation.ONBOARD_CONFIRMED:
            continue
        ls, ld = line.project(pl.element.pose.x, pl.element.pose.y)
        if not (0.0 <= ls <= line.length and abs(ld) <= w / 2):
            continue
        half = pl.element.extent[0] / 2
        if pl.s >= s_ego:
            front = min(front, max(0.0, pl.s - half - (s_ego + v.front_offset)))
        else:
            rear = min(rear, max(0.0, (s_ego - v.rear_overhang) - (pl.s + half)))
    return front, rear


def _lead(ctx: GuidanceContext, placed: list[_Placed]) -> Optional[_Placed]:
    ref = ctx.reference
    if ref is None:
        return None
    best = None
    for pl in placed:
        if pl.element.confirmation != Confirmation.ONBOARD_CONFIRMED or pl.s <= ref.ego_s:
            continue
        w = ref.span_at(pl.s).width
        if abs(pl.d) > w / 2 + 0.3:
            continue
        if best is None or (pl.s, pl.element.id) < (best.s, best.element.id):
            best = pl
    return best


def _bumper_gap(ctx: GuidanceContext, lead: _Placed) -> float:
    return lead.s - lead.element.extent[0] / 2 - (ctx.reference.ego_s + ctx.vehicle.front_offset)


def _light_states(scene: Scene) -> dict[int, tuple[LightColor, Optional[float]]]:
    return {e.signal_id: (e.light_state or LightColor.UNKNOWN, e.confidence)
            for e in scene.scenery if e.kind == SceneryKind.TRAFFIC_LIGHT and e.signal_id is not None}


def _next_stop_line(ctx: GuidanceContext, relevant: set) -> Optional[tuple[SceneryElement, float]]:
    """Nearest stop line ahead of the front bumper on the route, with its bumper distance."""
    ref = ctx.reference
    if ref is None:
        return None
    front = ref.ego_s + ctx.vehicle.front_offset
    best = None
    for e in ctx.scene.scenery:
        if e.kind != SceneryKind.STOP_LINE or e.id not in relevant:
            continue
        s, d = ref.line.project(*e.geometry[0])
        if abs(d) > ref.span_at(s).width / 2 + 1.0:
            continue
        dist = s - front
        if dist < -0.5:
            continue
        if best is None or dist < best[1]:
            best = (e, dist)
    return best


def assess_situation(s: Situation, ctx: GuidanceContext, params: Optional[GuidanceParams] = None) -> Situation:
    """Attach gap quality, lane-change feasibility, stop-line, lead and V2X aspects."""
    p = params or GuidanceParams()
    out: dict[str, Assessment] = {}
    ref = ctx.reference
    rel = set(s.relevant_elements)
    v = ctx.ego_speed
    self_rep = ctx.scene.self_rep
    if ref is not None:
        placed = _placed(ctx, rel)
        for side, nb, skill in (("left", ref.current.left_id, Maneuver.LANE_CHANGE_LEFT),
                                ("right", ref.current.right_id, Maneuver.LANE_CHANGE_RIGHT)):
            lane_el = f"lane/{nb}" if nb is not None else None
            if nb is None or lane_el not in rel:
                out[f"gap_{side}"] = Assessment(EGO_ID, score=0.0)
                out[f"lane_change_{side}"] = Assessment(EGO_ID, flag=False)
                continue
            front, rear = _lane_gaps(ctx, nb, placed)
            q = gap_quality(front, rear, v, p.t_gap_min)
            out[f"gap_{side}"] = Assessment(lane_el, score=q, value=min(front, rear))
            out[f"lane_change_{side}"] = Assessment(lane_el, flag=bool(q >= 0.5 and self_rep.can(skill)))
        lead = _lead(ctx, placed)
        if lead is not None:
            out["lead"] = Assessment(lead.element.id, score=lead.element.velocity, value=_bumper_gap(ctx, lead))
        stop = _next_stop_line(ctx, rel)
        if stop is not None:
            e, dist = stop
            if e.signal_id is None:
                demanded = True
            else:
                state = _light_states(ctx.scene).get(e.signal_id, (LightColor.UNKNOWN, None))[0]
                demanded = state in (LightColor.RED, LightColor.UNKNOWN)
                if state == LightColor.YELLOW:
                    # stop on yellow only when it does not take more than firm braking
                    demanded = v * v / (2.0 * max(dist, 0.1)) <= p.yellow_max_decel
            out["stop_line"] = Assessment(e.id, value=dist, flag=demanded)
        v2x = [pl for pl in placed if pl.element.confirmation == Confirmation.V2X_ONLY
               and ref.ego_s <= pl.s <= ref.ego_s + p.v2x_range and abs(pl.d) <= p.lateral_band]
        if v2x:
            near = min(v2x, key=lambda pl: (pl.s, pl.element.id))
            out["v2x_caution"] = Assessment(near.element.id, flag=True, value=near.s - ref.ego_s)
        if ctx.goal is not None:
            gs, gd = ref.line.project(*ctx.goal)
            out["goal"] = Assessment(EGO_ID, value=gs - ref.ego_s)
    return dataclasses.replace(s, assessments=out)


# --- behaviour planning ----------------------------------------------------------

@dataclass(frozen=True)
class GuidanceState:
    failing_cycles: int = 0
    stop_system: bool = False
    lane_change_target: Optional[int] = None
    last_maneuver: Optional[Maneuver] = None
    cleared_stops: frozenset[str] = frozenset()


@dataclass(frozen=True)
class BehaviorDecision:
    maneuver: Maneuver
    targets: tuple[TargetPose, ...]
    auxiliary: frozenset[Auxiliary] = frozenset()
    rule: int = 5
    conditions: tuple[bool, bool, bool, bool] = (False, False, False, False)
    reason: Reason = Reason.NONE
    warnings: tuple[str, ...] = ()


def braking_envelope(v: float, p: GuidanceParams) -> float:
    return v * v / (2.0 * p.a_comfort) + p.envelope_margin


def follow_threshold(v: float, v_lead: float, p: GuidanceParams) -> float:
    """Bumper gap below which the lead is followed.

    The larger of the time gap and the comfortable closing distance, plus
    twice the standstill gap so a vehicle held at the standstill gap behind
    a stopped lead keeps following it.
    """
    return max(v * p.t_follow, (v * v - v_lead * v_lead) / (2.0 * p.a_comfort)) + 2.0 * p.standstill_gap


def _corridor(ref: RouteReference, s_lo: float, s_hi: float, half_width: float, shift: float = 0.0
              ) -> tuple[tuple[Point, ...], ...]:
    piece = ref.line.slice(s_lo, s_hi)
    if shift:
        x, y = piece.frenet_to_xy(piece.s, np.full(len(piece.s), shift))
        piece = Polyline(np.stack([x, y], axis=1))
    # drop near-collinear vertices: fewer, longer pieces cover the same band
    piece = Polyline(shapely.simplify(shapely.LineString(piece.points), 0.02).coords)
    return tuple(tuple((float(a), float(b)) for a, b in poly) for poly in corridor_polygons(piece, half_width))


def _pose_on(ref: RouteReference, s: float, d: float = 0.0) -> Pose2D:
    x, y = ref.line.frenet_to_xy(s, d)
    return Pose2D(float(x), float(y), float(ref.line.heading_at(s)))


def _reference_points(ref: RouteReference, s_lo: float, s_hi: float) -> tuple[Point, ...]:
    piece = ref.line.slice(s_lo, s_hi)
    return tuple((float(a), float(b)) for a, b in piece.points)


def _emergency_target(ctx: GuidanceContext, p: GuidanceParams) -> TargetPose:
    ref = ctx.reference
    pose = ctx.ego_pose
    if ref is not None:
        lo, hi = ref.ego_s - p.corridor_behind, ref.ego_s + p.corridor_ahead
        half = ref.current.width / 2 + p.corridor_margin
        return TargetPose(_pose_on(ref, ref.ego_s, ref.ego_d), 0.0, _corridor(ref, lo, hi, half),
                          _reference_points(ref, lo, hi), Maneuver.EMERGENCY_STOP,
                          sampling_ranges=SamplingRanges(lateral=0.0))
    box = rectangle(pose.x + 40 * math.cos(pose.heading), pose.y + 40 * math.sin(pose.heading), pose.heading,
                    100.0, 6.0)
    line = (pose.xy, pose.to_parent(100.0, 0.0))
    return TargetPose(pose, 0.0, (tuple(map(tuple, box.tolist())),), line, Maneuver.EMERGENCY_STOP,
                      sampling_ranges=SamplingRanges(lateral=0.0))


def _lane_change_needed(ctx: GuidanceContext, route_edges: Sequence[int]) -> Optional[Maneuver]:
    """Lane change the route demands: our chain ends before the next route edge but a neighbour reaches it."""
    ref = ctx.reference
    if ref is None or not route_edges:
        return None
    if any(sp.road_id in route_edges and sp.road_id != ref.current.road_id for sp in ref.spans):
        return None
    cur_road = ref.current.road_id
    if cur_road not in route_edges:
        return None
    idx = list(route_edges).index(cur_road)
    if idx + 1 >= len(route_edges):
        return None
    nxt = route_edges[idx + 1]
    lanes = _lane_elements(ctx.scene)
    for side, nb in ((Maneuver.LANE_CHANGE_LEFT, ref.current.left_id), (Maneuver.LANE_CHANGE_RIGHT, ref.current.right_id)):
        if nb is None or nb not in lanes:
            continue
        succ_roads = {lanes[s].road_id for s in lanes[nb].successors if s in lanes}
        if nxt in succ_roads:
            return side
    return None


def plan_behavior(s: Situation, ctx: GuidanceContext, escalation: Escalation = Escalation.NONE,
                  state: Optional[GuidanceState] = None, params: Optional[GuidanceParams] = None,
                  requested: Optional[Maneuver] = None) -> tuple[BehaviorDecision, GuidanceState]:
    """Fixed-priority cascade; the first rule whose condition holds decides.

    1 emergency_stop   stop_system escalation, only emergency skills left, or no lane context
    2 stop_at_point    red/yellow/unknown signal or the goal within the braking envelope
    3 lane change      demanded by the route (or requested by the operator) and assessed feasible
    4 follow_vehicle   onboard-confirmed lead closer than the follow threshold
    5 follow_lane      otherwise

    V2X-only elements never trigger rules 1-4; they only cap the target speed.
    """
    p = params or GuidanceParams()
    state = state or GuidanceState()
    ref = ctx.reference
    a = s.assessments
    v = ctx.ego_speed
    self_rep = ctx.scene.self_rep
    warnings: list[str] = []
    only_emergency = not any(self_rep.can(m) for m in (Maneuver.FOLLOW_LANE, Maneuver.STOP_AT_POINT))

    c1 = escalation == Escalation.STOP_SYSTEM or state.stop_system or only_emergency or ref is None
    envelope = braking_envelope(v, p)
    stop_dist = None
    stop_reason = None
    if ref is not None:
        sl = a.get("stop_line")
        if (sl is not None and sl.flag and sl.value is not None and sl.value <= envelope
                and sl.subject not in state.cleared_stops):
            stop_dist, stop_reason = sl.value, sl.subject
        g = a.get("goal")
        if g is not None and g.value is not None and g.value - ctx.vehicle.front_offset <= envelope:
            gd = g.value - ctx.vehicle.front_offset
            if stop_dist is None or gd < stop_dist:
                stop_dist, stop_reason = gd, "goal"
    c2 = stop_dist is not None
    route_edges = s.route_context.edges if s.route_context is not None else ()
    wanted = _lane_change_needed(ctx, route_edges)
    if requested in (Maneuver.LANE_CHANGE_LEFT, Maneuver.LANE_CHANGE_RIGHT):
        wanted = requested
    if state.lane_change_target is not None and ref is not None and ref.current.lane_id != state.lane_change_target:
        wanted = state.last_maneuver if state.last_maneuver in (Maneuver.LANE_CHANGE_LEFT,
                                                                 Maneuver.LANE_CHANGE_RIGHT) else wanted
    feasible = False
    if wanted is not None:
        key = "lane_change_left" if wanted == Maneuver.LANE_CHANGE_LEFT else "lane_change_right"
        feasible = bool(a.get(key) and a[key].flag)
        if requested == wanted and not feasible:
            warnings.append(f"operator request {wanted.value} rejected: not feasible")
    c3 = wanted is not None and feasible
    lead_a = a.get("lead")
    c4 = False
    if lead_a is not None and ref is not None:
        c4 = lead_a.value < follow_threshold(v, lead_a.score or 0.0, p)
    conditions = (c1, c2, c3, c4)

    if c1:
        reason = Reason.SKILL_LIMITED if (ref is None or only_emergency) and not (
            escalation == Escalation.STOP_SYSTEM or state.stop_system) else Reason.NONE
        if escalation == Escalation.STOP_SYSTEM or state.stop_system:
            reason = Reason.COMPONENT_FAILED
        tp = _emergency_target(ctx, p)
        dec = BehaviorDecision(Maneuver.EMERGENCY_STOP, (tp,), frozenset({Auxiliary.LIGHTS}), 1, conditions, reason,
                               tuple(warnings))
        return dec, dataclasses.replace(state, stop_system=state.stop_system or escalation == Escalation.STOP_SYSTEM,
                                        lane_change_target=None, last_maneuver=Maneuver.EMERGENCY_STOP)

    limit = min(x for x in (ref.current.speed_limit, p.comfort_speed) if x is not None)
    cap = None
    if "v2x_caution" in a:
        cap = p.v2x_speed_factor * (ref.current.speed_limit or p.comfort_speed)
    # stop and follow profiles accelerate on their own; bound them by the lane limit
    bound = limit if cap is None else min(limit, cap)
    lo = ref.ego_s - p.corridor_behind
    half = ref.current.width / 2 + p.corridor_margin

    if c2:
        s_stop = ref.ego_s + stop_dist
        cleared = state.cleared_stops
        if stop_reason != "goal":
            s_stop -= p.stop_margin
            line = next(e for e in ctx.scene.scenery if e.id == stop_reason)
            if line.signal_id is None and v < p.standstill_speed and stop_dist <= 1.0:
                # unsignalized stop line: released once the vehicle has come to rest at it
                cleared = cleared | {stop_reason}
        lead = _lead(ctx, _placed(ctx, set(s.relevant_elements)))
        if lead is not None and lead.element.velocity < 0.5:
            s_stop = min(s_stop, lead.s - lead.element.extent[0] / 2 - p.standstill_gap - ctx.vehicle.front_offset)
        s_stop = max(s_stop, lo + 1.0)
        hi = max(ref.ego_s + p.corridor_ahead, s_stop + 20.0)
        tp = TargetPose(_pose_on(ref, s_stop), 0.0, _corridor(ref, lo, hi, half), _reference_points(ref, lo, hi),
                        Maneuver.STOP_AT_POINT, speed_cap=bound)
        return (BehaviorDecision(Maneuver.STOP_AT_POINT, (tp,), frozenset(), 2, conditions, Reason.NONE,
                                 tuple(warnings)),
                dataclasses.replace(state, lane_change_target=None, last_maneuver=Maneuver.STOP_AT_POINT,
                                    cleared_stops=cleared))

    look = max(p.lookahead_min, v * p.lookahead_time)
    if c3:
        left = wanted == Maneuver.LANE_CHANGE_LEFT
        nb = ref.current.left_id if left else ref.current.right_id
        lanes = _lane_elements(ctx.scene)
        nb_w = (lanes[nb].width or 3.5) if nb in lanes else ref.current.width
        offset = (ref.current.width + nb_w) / 2 * (1 if left else -1)
        hi = ref.ego_s + p.corridor_ahead
        corridor = _corridor(ref, lo, hi, (ref.current.width + nb_w) / 2 + p.corridor_margin, shift=offset / 2)
        speed = min(limit, cap) if cap is not None else limit
        tp = TargetPose(_pose_on(ref, ref.ego_s + look, offset), speed, corridor, _reference_points(ref, lo, hi),
                        wanted, sampling_ranges=SamplingRanges(lateral=0.5), speed_cap=cap)
        aux = frozenset({Auxiliary.INDICATOR_LEFT if left else Auxiliary.INDICATOR_RIGHT})
        return (BehaviorDecision(wanted, (tp,), aux, 3, conditions, Reason.NONE, tuple(warnings)),
                dataclasses.replace(state, lane_change_target=nb, last_maneuver=wanted))

    if c4:
        lead = _lead(ctx, _placed(ctx, set(s.relevant_elements)))
        el = lead.element
        gap = max(p.standstill_gap, el.velocity * p.t_follow)
        s_t = lead.s - el.extent[0] / 2 - gap - ctx.vehicle.front_offset
        s_t = max(s_t, lo + 1.0)
        hi = max(ref.ego_s + p.corridor_ahead, s_t + 20.0)
        speed = min(el.velocity, limit)
        if cap is not None:
            speed = min(speed, cap)
        tp = TargetPose(_pose_on(ref, s_t), speed, _corridor(ref, lo, hi, half), _reference_points(ref, lo, hi),
                        Maneuver.FOLLOW_VEHICLE, linked_element=el.id,
                        linked_state=LinkedState(el.pose.x, el.pose.y, el.velocity, el.pose.heading, s.base_scene_tick),
                        follow_gap=gap, speed_cap=bound)
        return (BehaviorDecision(Maneuver.FOLLOW_VEHICLE, (tp,), frozenset(), 4, conditions, Reason.NONE,
                                 tuple(warnings)),
                dataclasses.replace(state, lane_change_target=None, last_maneuver=Maneuver.FOLLOW_VEHICLE))

    hi = ref.ego_s + p.corridor_ahead
    speed = min(limit, cap) if cap is not None else limit
    tp = TargetPose(_pose_on(ref, ref.ego_s + look), speed, _corridor(ref, lo, hi, half),
                    _reference_points(ref, lo, hi), Maneuver.FOLLOW_LANE, speed_cap=cap)
    return (BehaviorDecision(Maneuver.FOLLOW_LANE, (tp,), frozenset(), 5, conditions, Reason.NONE, tuple(warnings)),
            dataclasses.replace(state, lane_change_target=None, last_maneuver=Maneuver.FOLLOW_LANE))


# --- execution monitoring -------------------------------------------------------

def monitor_guidance(reports: Sequence[ExecutionReport], state: GuidanceState, tick: int,
                     ctx: Optional[GuidanceContext] = None, params: Optional[GuidanceParams] = None
                     ) -> tuple[Escalation, Optional[ExecutionReport], GuidanceState]:
    """Escalation for the reports collected since the previous guidance cycle.

    A component failure latches stop_system. A cycle with any
    no_collision_free_trajectory report counts as failing; the
    ``failure_persistence``-th consecutive failing cycle escalates
    replan_route (naming the blocked route edge when it can be located)
    and restarts the count.
    """
    p = params or GuidanceParams()
    if state.stop_system or any(r.reason == Reason.COMPONENT_FAILED for r in reports):
        failed = next((r for r in reports if r.reason == Reason.COMPONENT_FAILED), None)
        rep = ExecutionReport("guidance", tick, Status.FAILED, Reason.COMPONENT_FAILED, Escalation.STOP_SYSTEM,
                              component=failed.component if failed else None)
        return Escalation.STOP_SYSTEM, rep, dataclasses.replace(state, stop_system=True)
    blocked = [r for r in reports if r.reason == Reason.NO_COLLISION_FREE_TRAJECTORY]
    if not blocked:
        return Escalation.NONE, None, dataclasses.replace(state, failing_cycles=0)
    n = state.failing_cycles + 1
    if n >= p.failure_persistence:
        loc = next((r.location for r in reversed(blocked) if r.location is not None), None)
        edge = edge_at_location(ctx, loc) if ctx is not None and loc is not None else None
        rep = ExecutionReport("guidance", tick, Status.DEGRADED, Reason.NO_COLLISION_FREE_TRAJECTORY,
                              Escalation.REPLAN_ROUTE, edge_id=edge, location=loc)
        return Escalation.REPLAN_ROUTE, rep, dataclasses.replace(state, failing_cycles=0)
    return Escalation.NONE, None, dataclasses.replace(state, failing_cycles=n)


def edge_at_location(ctx: GuidanceContext, loc: Point) -> Optional[int]:
    ref = ctx.reference
    if ref is None:
        return None
    s, _ = ref.line.project(*loc)
    return ref.span_at(s).road_id


# --- V2X extract ---------------------------------------------------------------

def build_v2x_situation(scene: Scene, local_to_map: Pose2D, planned: Optional[Maneuver], tick: int,
                        ego_pose_map: Optional[Pose2D] = None) -> Situation:
    """Broadcast extract: ego state, onboard-confirmed non-private elements, planned maneuver.

    Positions are expressed in the map frame; self-monitoring internals and
    V2X-only elements (which would only echo what others sent) stay home.
    """
    out = []
    for e in scene.dynamic_elements:
        if e.privacy or e.confirmation != Confirmation.ONBOARD_CONFIRMED:
            continue
        pose = local_to_map.compose(e.pose)
        out.append(dataclasses.replace(e, pose=pose, provenance=e.provenance | MAP, lane_assignment=None))
    ego = ego_pose_map if ego_pose_map is not None else local_to_map.compose(scene.self_rep.pose)
    return Situation(
        tick=tick,
        base_scene_tick=scene.tick,
        relevant_elements=tuple(e.id for e in out),
        assessments={},
        route_context=None,
        purpose=Purpose.V2X_BROADCAST,
        elements=tuple(out),
        ego_pose=ego,
        ego_velocity=scene.self_rep.velocity,
        planned_maneuver=planned,
    )
