"""Map provision: extracts around the map-relative pose and map updates."""
from __future__ import annotations

import dataclasses
import math
from typing import Optional, Sequence

import numpy as np

from ..config import LocalizationParams
from ..core.geometry import Pose2D
from ..core.types import SceneryElement, SceneryKind
from .maps import FeatureMap, FlowOverlay, Landmark, Lane, LaneMap, MapStack, RoadNetworkMap, RoadReport
from .pose import MapRelativePose, associate_landmarks


class LoopViolation(Exception):
    """A map-derived datum was offered back to the map updater."""

    def __init__(self, element_id, tick: Optional[int] = None):
        super().__init__(f"loop_violation: element {element_id} carries MAP provenance")
        self.element_id = element_id
        self.tick = tick


def _segment_distance(px: float, py: float, a: tuple[float, float], b: tuple[float, float]) -> float:
    ax, ay = a
    dx, dy = b[0] - ax, b[1] - ay
    L2 = dx * dx + dy * dy
    t = 0.0 if L2 == 0 else min(1.0, max(0.0, ((px - ax) * dx + (py - ay) * dy) / L2))
    return math.hypot(px - ax - t * dx, py - ay - t * dy)


def _lane_distance(lane: Lane, x: float, y: float) -> float:
    pts = np.asarray(lane.centerline, dtype=float)
    if len(pts) == 1:
        return math.hypot(pts[0][0] - x, pts[0][1] - y)
    a, d = pts[:-1], np.diff(pts, axis=0)
    L2 = np.einsum("ij,ij->i", d, d)
    t = np.clip(np.einsum("ij,ij->i", [x, y] - a, d) / np.where(L2 == 0, 1.0, L2), 0.0, 1.0)
    return float(np.min(np.hypot(*(a + t[:, None] * d - [x, y]).T)))


def retrieve_map_extract(pose: MapRelativePose, radius: float, maps: MapStack,
                         params: Optional[LocalizationParams] = None) -> tuple[MapStack, list[str]]:
    """Every map entity within ``radius`` (closed ball) of the pose, per level, ordered by id.

    Roads keep the end nodes of included edges; lanes drop references to
    lanes outside the extract so each level stays self-consistent.
    """
    p = params or LocalizationParams()
    if not radius > 0:
        raise ValueError("radius must be positive")
    empty = MapStack(RoadNetworkMap((), ()), LaneMap(()), FeatureMap(()))
    if pose.uncertainty > p.uncertainty_cutoff:
        return empty, [f"pose uncertainty {pose.uncertainty:.2f} m^2 above cutoff: map augmentation disabled"]
    x, y = pose.pose.x, pose.pose.y
    nodes = maps.roads.node_by_id
    edges = []
    for e in sorted(maps.roads.edges, key=lambda e: e.id):
        a, b = nodes[e.source], nodes[e.target]
        if _segment_distance(x, y, (a.x, a.y), (b.x, b.y)) <= radius:
            edges.append(e)
    node_ids = {n.id for n in maps.roads.nodes if math.hypot(n.x - x, n.y - y) <= radius}
    node_ids |= {e.source for e in edges} | {e.target for e in edges}
    roads = RoadNetworkMap(tuple(nodes[i] for i in sorted(node_ids)), tuple(edges))

    lanes = [l for l in sorted(maps.lanes.lanes, key=lambda l: l.id) if _lane_distance(l, x, y) <= radius]
    kept = {l.id for l in lanes}
    lanes = [dataclasses.replace(
        l,
        left_id=l.left_id if l.left_id in kept else None,
        right_id=l.right_id if l.right_id in kept else None,
        successors=tuple(s for s in l.successors if s in kept),
    ) for l in lanes]
    feats = tuple(lm for lm in sorted(maps.features.landmarks, key=lambda l: l.id)
                  if math.hypot(lm.x - x, lm.y - y) <= radius)
    return MapStack(roads, LaneMap(tuple(lanes)), FeatureMap(feats)), []


def update_feature_map(features: Sequence[SceneryElement], pose: MapRelativePose, fmap: FeatureMap, tick: int,
                       local_to_map: Pose2D, params: Optional[LocalizationParams] = None
                       ) -> tuple[FeatureMap, list[str]]:
    """Blend perceived landmarks (local frame) into the feature map.

    Raises LoopViolation before touching the map if any input carries MAP
    provenance. Matched landmarks move a fraction ``smoothing_beta`` toward
    the observation; unmatched observations become new landmarks.
    """
    p = params or LocalizationParams()
    for f in features:
        if "MAP" in f.provenance:
            raise LoopViolation(f.id, tick)
    if pose.matched < 1 and pose.uncertainty >= p.uncertainty_cutoff:
        return fmap, ["feature map update skipped: pose unmatched and too uncertain"]
    marks = [f for f in features if f.kind == SceneryKind.LANDMARK and f.geometry]
    if not marks:
        return fmap, []
    obs = local_to_map.to_parent_array(np.array([f.geometry[0] for f in marks], dtype=float))
    pairs = dict(associate_landmarks(obs, fmap, p.association_radius))
    lms = list(fmap.landmarks)
    beta = p.smoothing_beta
    matched_lm = {j: i for i, j in pairs.items()}
    for j, i in matched_lm.items():
        lm = lms[j]
        lms[j] = dataclasses.replace(lm, x=lm.x + beta * (obs[i, 0] - lm.x), y=lm.y + beta * (obs[i, 1] - lm.y),
                                     last_update_tick=tick)
    next_id = max((l.id for l in lms), default=0) + 1
    for i, f in enumerate(marks):
        if i in pairs:
            continue
        lms.append(Landmark(next_id, float(obs[i, 0]), float(obs[i, 1]), f.tag or "pole", tick))
        next_id += 1
    return FeatureMap(tuple(lms)), []


def update_road_state(reports: Sequence[RoadReport], roads: RoadNetworkMap, tick: int,
                      params: Optional[LocalizationParams] = None) -> tuple[RoadNetworkMap, list[str]]:
    """Overlay reported flow states; V2X-sourced ones expire after ``flow_ttl`` ticks."""
    p = params or LocalizationParams()
    warnings = []
    updates = {}
    for e in roads.edges:
        if e.flow is not None and e.flow.expires_tick is not None and tick >= e.flow.expires_tick:
            updates[e.id] = dataclasses.replace(e, flow=None)
    for r in reports:
        edge = roads.edge_by_id.get(r.edge_id)
        if edge is None:
            warnings.append(f"road report for unknown edge {r.edge_id} ignored")
            continue
        expires = r.tick + p.flow_ttl if "V2X" in r.provenance else None
        updates[r.edge_id] = dataclasses.replace(edge, flow=FlowOverlay(r.state, r.tick, r.provenance, expires))
    if not updates:
        return roads, warnings
    return roads.replace_edges(updates), warnings
