"""Strategic level: mission validation, k-route planning and replanning on request."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .config import NavigationParams
from .core.geometry import Polyline, Pose2D
from .core.types import Criterion, Escalation, ExecutionReport, Mission, Route, RouteSet
from .localization.maps import FlowState, LaneMap, RoadEdge, RoadNetworkMap


class NavigationError(Exception):
    def __init__(self, kind: str, message: str = ""):
        super().__init__(f"{kind}: {message}" if message else kind)
        self.kind = kind


def plan_mission(m: Mission, roads: RoadNetworkMap, start: Optional[int] = None) -> list[int]:
    """Waypoints in the given order, each reachable from the one before (and from ``start``)."""
    for w in m.waypoints:
        if w not in roads.node_by_id:
            raise NavigationError("mission_infeasible", f"unknown waypoint {w}")
    chain = ([start] if start is not None else []) + list(m.waypoints)
    for a, b in zip(chain, chain[1:]):
        if b not in roads.reachable(a):
            raise NavigationError("mission_infeasible", f"node {b} unreachable from {a}")
    return list(m.waypoints)


@dataclass(frozen=True)
class WeightPolicy:
    criterion: Criterion = Criterion.SHORTEST_TIME
    penalties: dict[int, float] = field(default_factory=dict)
    blocked: frozenset[int] = frozenset()
    low_energy: bool = False
    tick: Optional[int] = None


def edge_weight(e: RoadEdge, policy: WeightPolicy, params: NavigationParams) -> Optional[float]:
    """Weight of an edge under a policy, or None when the edge is unusable."""
    if e.id in policy.blocked or e.flow_state(policy.tick) == FlowState.BLOCKED:
        return None
    if policy.criterion == Criterion.SHORTEST_DISTANCE:
        w = e.length
    else:
        w = e.length / e.speed_limit
        if policy.criterion == Criterion.MAX_COMFORT:
            w += params.turn_weight * abs(e.turn_angle)
    if e.flow_state(policy.tick) == FlowState.CONGESTED:
        w *= params.congestion_factor
    if policy.low_energy:
        w *= e.energy_factor
    return w * policy.penalties.get(e.id, 1.0)


def path_cost(edges: Sequence[int], weights: dict[int, float]) -> float:
    total = 0.0
    for eid in edges:
        total += weights[eid]
    return total


def _shortest(roads: RoadNetworkMap, weights: dict[int, float], src: int, dst: int,
              banned_nodes: frozenset[int] = frozenset(), banned_edges: frozenset[int] = frozenset()
              ) -> Optional[tuple[float, tuple[int, ...]]]:
    """Dijkstra with ties broken by the lexicographically smaller edge-id sequence."""
    heap: list[tuple[float, tuple[int, ...], int]] = [(0.0, (), src)]
    done: set[int] = set()
    while heap:
        cost, path, node = heapq.heappop(heap)
        if node in done:
            continue
        done.add(node)
        if node == dst:
            return cost, path
        for e in roads.out_edges.get(node, []):
            if e.id in banned_edges or e.id not in weights or e.target in banned_nodes or e.target in done:
                continue
            heapq.heappush(heap, (cost + weights[e.id], path + (e.id,), e.target))
    return None


def k_shortest_paths(roads: RoadNetworkMap, weights: dict[int, float], src: int, dst: int, k: int
                     ) -> list[tuple[float, tuple[int, ...]]]:
    """Up to k loopless paths in (cost, edge sequence) order, by deviation from earlier paths."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if src == dst:
        return [(0.0, ())]
    first = _shortest(roads, weights, src, dst)
    if first is None:
        return []
    found = [first]
    candidates: list[tuple[float, tuple[int, ...]]] = []
    seen = {first[1]}
    edges = roads.edge_by_id
    while len(found) < k:
        _, last = found[-1]
        nodes = [src] + [edges[e].target for e in last]
        for i in range(len(last)):
            spur = nodes[i]
            root = last[:i]
            banned_e = frozenset(p[i] for _, p in found if p[:i] == root and len(p) > i)
            banned_n = frozenset(nodes[:i])
            sp = _shortest(roads, weights, spur, dst, banned_n, banned_e)
            if sp is None:
                continue
            path = root + sp[1]
            if path in seen:
                continue
            seen.add(path)
            heapq.heappush(candidates, (path_cost(path, weights), path))
        if not candidates:
            break
        found.append(heapq.heappop(candidates))
    return [(path_cost(p, weights), p) for _, p in found]


def plan_routes(waypoints: Sequence[int], roads: RoadNetworkMap, criterion: Criterion, k: int = 3,
                start: Optional[int] = None, current_edge: Optional[int] = None,
                policy: Optional[WeightPolicy] = None, params: Optional[NavigationParams] = None,
                version: int = 0) -> RouteSet:
    """Best route plus up to k-1 alternatives through all waypoints.

    Driving starts at ``start`` or, when the vehicle is on an edge, with that
    edge (its target node is where alternatives may branch). Alternatives
    deviate on the first leg; later legs use their best path.
    """
    params = params or NavigationParams()
    policy = policy or WeightPolicy(criterion)
    if policy.criterion != criterion:
        policy = WeightPolicy(criterion, policy.penalties, policy.blocked, policy.low_energy, policy.tick)
    weights = {}
    for e in roads.edges:
        w = edge_weight(e, policy, params)
        if w is not None:
            weights[e.id] = w
    prefix: tuple[int, ...] = ()
    if current_edge is not None:
        if current_edge not in roads.edge_by_id:
            raise NavigationError("no_route", f"unknown current edge {current_edge}")
        prefix = (current_edge,)
        origin = roads.edge_by_id[current_edge].target
        # the edge under the vehicle is driven regardless of its flow state
        weights.setdefault(current_edge, edge_weight(roads.edge_by_id[current_edge],
                                                     WeightPolicy(criterion), params) or 0.0)
    elif start is not None:
        origin = start
    else:
        raise NavigationError("no_route", "no start position")
    if not waypoints:
        raise NavigationError("no_route", "no waypoints")
    legs = [origin] + list(waypoints)
    per_leg = []
    for a, b in zip(legs, legs[1:]):
        paths = k_shortest_paths(roads, weights, a, b, k if not per_leg else 1)
        if not paths:
            raise NavigationError("no_route", f"no path {a} -> {b}")
        per_leg.append(paths)
    tail = tuple(e for leg in per_leg[1:] for e in leg[0][1])
    routes = []
    for _, first_leg in per_leg[0]:
        edges_ = prefix + first_leg + tail
        routes.append(Route(edges_, path_cost(edges_, weights)))
    routes.sort(key=lambda r: (r.cost, r.edges))
    return RouteSet(routes[0], tuple(routes[1:k]), version)


@dataclass(frozen=True)
class NavigationState:
    mission: Optional[Mission] = None
    routes: Optional[RouteSet] = None
    penalties: dict[int, float] = field(default_factory=dict)
    removed: frozenset[int] = frozenset()
    version: int = 0


def handle_guidance_request(req: ExecutionReport, nav: NavigationState, roads: RoadNetworkMap,
                            current_edge: Optional[int], start: Optional[int] = None,
                            low_energy: bool = False, tick: Optional[int] = None,
                            params: Optional[NavigationParams] = None) -> tuple[RouteSet, NavigationState]:
    """Replan after a replan_route escalation.

    The edge named in the request is removed when the map marks it blocked
    and otherwise has its weight multiplied by the penalty factor; both
    persist for later replans.
    """
    params = params or NavigationParams()
    if req.escalation != Escalation.REPLAN_ROUTE:
        raise ValueError(f"handle_guidance_request needs escalation replan_route, got {req.escalation.value}")
    if nav.mission is None:
        raise NavigationError("no_route", "no active mission")
    penalties = dict(nav.penalties)
    removed = set(nav.removed)
    if req.edge_id is not None and req.edge_id in roads.edge_by_id:
        if roads.edge_by_id[req.edge_id].flow_state(tick) == FlowState.BLOCKED:
            removed.add(req.edge_id)
        else:
            penalties[req.edge_id] = penalties.get(req.edge_id, 1.0) * params.penalty
    new_nav = NavigationState(nav.mission, nav.routes, penalties, frozenset(removed), nav.version + 1)
    rs = replan(new_nav, roads, current_edge, start, low_energy, tick, params)
    return rs, NavigationState(nav.mission, rs, penalties, frozenset(removed), rs.version)


def replan(nav: NavigationState, roads: RoadNetworkMap, current_edge: Optional[int], start: Optional[int] = None,
           low_energy: bool = False, tick: Optional[int] = None,
           params: Optional[NavigationParams] = None) -> RouteSet:
    params = params or NavigationParams()
    if nav.mission is None:
        raise NavigationError("no_route", "no active mission")
    policy = WeightPolicy(nav.mission.criterion, dict(nav.penalties), nav.removed, low_energy, tick)
    rs = plan_routes(nav.mission.waypoints, roads, nav.mission.criterion, params.k, start=start,
                     current_edge=current_edge, policy=policy, params=params, version=nav.version)
    for r in rs.all_routes():
        if any(e in nav.removed for e in r.edges[1 if current_edge is not None else 0:]):
            raise NavigationError("no_route", "route through a removed edge")
    return rs


def locate_edge(pose: Pose2D, roads: RoadNetworkMap, lanes: LaneMap, prefer: Sequence[int] = ()) -> Optional[int]:
    """Road edge under the pose: smallest lateral offset over lanes, preferring edges in ``prefer``."""
    best = None
    pref = set(prefer)
    for lane in lanes.lanes:
        if lane.road_id not in roads.edge_by_id:
            continue
        line = lane.polyline
        s, d = line.project(pose.x, pose.y)
        if s < -1.0 or s > line.length + 1.0 or abs(d) > lane.width:
            continue
        key = (lane.road_id not in pref, abs(d) > lane.width / 2, abs(d), lane.road_id)
        if best is None or key < best[0]:
            best = (key, lane.road_id)
    return None if best is None else best[1]


def remaining_on_edge(pose: Pose2D, edge_id: int, lanes: LaneMap) -> float:
    ls = lanes.lanes_of_road(edge_id)
    if not ls:
        return 0.0
    line: Polyline = ls[0].polyline
    s, _ = line.project(pose.x, pose.y)
    return max(0.0, line.length - s)


def goal_node_position(roads: RoadNetworkMap, node: int) -> tuple[float, float]:
    n = roads.node_by_id[node]
    return (n.x, n.y)


def distance_to_node(pose: Pose2D, roads: RoadNetworkMap, node: int) -> float:
    x, y = goal_node_position(roads, node)
    return math.hypot(x - pose.x, y - pose.y)
