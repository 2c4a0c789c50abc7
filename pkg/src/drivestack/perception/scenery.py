"""Scenery, dynamic environment and scene assembly.

Two scenery variants are produced each cycle: the local one is built purely
from onboard sensing and is the only input allowed on the map-update
channel; the extended one adds map content (and map-dependent data such as
V2X elements placed through the map-relative pose).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..config import PerceptionParams
from ..core.errors import ContractViolation
from ..core.geometry import Point, Polyline, Pose2D
from ..core.provenance import MAP, VEH_ENV, join_all
from ..core.types import (DynamicElement, DynamicEnvironment, Scene, Scenery, SceneryElement, SceneryKind,
                          SelfRepresentation)
from ..core.validation import validate_scene
from ..localization.maps import MapStack
from .lanes import LaneTrackerState
from .occupancy import GridFeature
from .signals import LightEstimate
from .tracking import TrackSet


@dataclass(frozen=True)
class StopLineSighting:
    stop_id: int
    position: Point  # local frame
    lane_id: int
    signal_id: Optional[int] = None


@dataclass(frozen=True)
class LandmarkSighting:
    position: Point  # local frame
    tag: str


def lane_element_id(lane_id: int) -> str:
    return f"lane/{lane_id}"


def model_scenery(lanes: LaneTrackerState, features: Sequence[GridFeature], lights: dict[int, LightEstimate],
                  stop_lines: Sequence[StopLineSighting], landmarks: Sequence[LandmarkSighting], tick: int,
                  map_extract: Optional[MapStack] = None, map_to_local: Optional[Pose2D] = None
                  ) -> tuple[Scenery, Optional[Scenery], list[str]]:
    """Return (local scenery, extended scenery, warnings).

    Without a map extract the extended variant is the local one. A map
    extract without a pose cannot be placed, so the extended variant is
    omitted and a warning is returned.
    """
    local: list[SceneryElement] = []
    for h in lanes.hypotheses:
        if MAP in h.provenance:
            raise ContractViolation("local scenery received a map-assisted lane hypothesis", module="perception")
        pts = h.centerline()
        local.append(SceneryElement(
            id=lane_element_id(h.lane_id), kind=SceneryKind.LANE, geometry=_pts(pts), provenance=h.provenance,
            width=h.width, lane_id=h.lane_id, confidence=min(1.0, h.updates / 3.0),
        ))
    for s in sorted(stop_lines, key=lambda s: s.stop_id):
        local.append(SceneryElement(
            id=f"stop/{s.stop_id}", kind=SceneryKind.STOP_LINE, geometry=(s.position,), provenance=VEH_ENV,
            lane_id=s.lane_id, signal_id=s.signal_id,
        ))
    for lid in sorted(lights):
        est = lights[lid]
        if est.position is None:
            continue
        local.append(SceneryElement(
            id=f"light/{lid}", kind=SceneryKind.TRAFFIC_LIGHT, geometry=(est.position,), provenance=VEH_ENV,
            signal_id=lid, light_state=est.state, confidence=est.confidence,
        ))
    for k, f in enumerate(features):
        local.append(SceneryElement(
            id=f"obst/{k}", kind=SceneryKind.STATIC_OBSTACLE, geometry=f.polygon, provenance=f.provenance,
        ))
    for k, m in enumerate(landmarks):
        local.append(SceneryElement(
            id=f"feat/{k}", kind=SceneryKind.LANDMARK, geometry=(m.position,), provenance=VEH_ENV, tag=m.tag,
        ))
    local_scenery = Scenery(tick, tuple(local), extended=False)

    if map_extract is None:
        return local_scenery, local_scenery, []
    if map_to_local is None:
        return local_scenery, None, ["map extract without map-relative pose: extended scenery omitted"]
    return local_scenery, _extend(local_scenery, map_extract, map_to_local), []


def _pts(arr) -> tuple[Point, ...]:
    return tuple(map(tuple, np.asarray(arr, dtype=float).reshape(-1, 2).tolist()))


def _extend(local: Scenery, maps: MapStack, map_to_local: Pose2D) -> Scenery:
    by_id = {e.id: e for e in local.elements}
    limits = {e.id: e.speed_limit for e in maps.roads.edges}
    out: list[SceneryElement] = []
    map_lane_ids = set()
    for lane in sorted(maps.lanes.lanes, key=lambda l: l.id):
        eid = lane_element_id(lane.id)
        map_lane_ids.add(eid)
        seen = by_id.get(eid)
        prov = MAP if seen is None else seen.provenance | MAP
        out.append(SceneryElement(
            id=eid, kind=SceneryKind.LANE, geometry=_pts(map_to_local.to_parent_array(np.asarray(lane.centerline))),
            provenance=prov, width=lane.width, road_id=lane.road_id, lane_id=lane.id, left_id=lane.left_id,
            right_id=lane.right_id, successors=lane.successors, speed_limit=limits.get(lane.road_id),
            confidence=seen.confidence if seen is not None else None,
        ))
    for e in local.elements:
        if e.id not in map_lane_ids:
            out.append(e)
    for lane in sorted(maps.lanes.lanes, key=lambda l: l.id):
        for sl in lane.stop_lines:
            eid = f"stop/{sl.id}"
            if eid in by_id:
                continue
            by_id[eid] = None  # type: ignore[assignment]
            out.append(SceneryElement(
                id=eid, kind=SceneryKind.STOP_LINE, geometry=(map_to_local.to_parent(*sl.position),),
                provenance=MAP, lane_id=lane.id, signal_id=sl.signal_id,
            ))
    return Scenery(local.tick, tuple(out), extended=True)


_last_lines: list = [None, None]  # (elements, lines) of the previous call


def _lane_lines(scenery_elements: Sequence[SceneryElement]) -> list[tuple[int, Polyline, float]]:
    # the extended scene asks twice per cycle for the same elements
    if _last_lines[0] is scenery_elements:
        return _last_lines[1]
    out = []
    for e in scenery_elements:
        if e.kind == SceneryKind.LANE and e.lane_id is not None and len(e.geometry) >= 2:
            try:
                out.append((e.lane_id, Polyline(e.geometry), e.width or 3.5))
            except ValueError:
                continue
    if isinstance(scenery_elements, tuple):  # immutable, so safe to remember by identity
        _last_lines[:] = [scenery_elements, out]
    return out


def assign_lane(x: float, y: float, lanes: list[tuple[int, Polyline, float]], max_offset: float) -> Optional[int]:
    """Nearest lane by lateral offset within ``max_offset``, station inside the lane; ties to lower id."""
    best = None
    for lane_id, line, _ in lanes:
        s, d = line.project(x, y)
        if s < 0.0 or s > line.length or abs(d) > max_offset:
            continue
        key = (abs(d), lane_id)
        if best is None or key < best[0]:
            best = (key, lane_id)
    return None if best is None else best[1]


def track_to_element(t, lane_assignment: Optional[int] = None) -> DynamicElement:
    cov = t.position_covariance()
    cov = 0.5 * (cov + cov.T)
    return DynamicElement(
        id=t.id,
        pose=Pose2D(t.mean[0], t.mean[1], t.motion_heading),
        velocity=t.speed,
        yaw_rate=0.0,
        extent=t.extent,
        state_covariance=((float(cov[0, 0]), float(cov[0, 1])), (float(cov[1, 0]), float(cov[1, 1]))),
        provenance=t.provenance,
        lane_assignment=lane_assignment,
        classification=t.classification,
        privacy=t.privacy,
    )


def model_dynamic_environment(tracks: TrackSet, scenery: Scenery, params: Optional[PerceptionParams] = None,
                              extra: Sequence[DynamicElement] = ()) -> DynamicEnvironment:
    """Confirmed tracks as dynamic elements with a lane assignment.

    Assignment is pure augmentation: an element off every lane stays in the
    output unassigned, and no raw track field is altered. ``extra`` elements
    (e.g. V2X-received ones already placed in the local frame) are assigned
    the same way.
    """
    p = params or PerceptionParams()
    lanes = _lane_lines(scenery.elements)
    out = []
    for t in tracks.confirmed():
        out.append(track_to_element(t, assign_lane(t.mean[0], t.mean[1], lanes, p.lane_assign_distance)))
    for e in extra:
        lane = assign_lane(e.pose.x, e.pose.y, lanes, p.lane_assign_distance)
        out.append(dataclasses.replace(e, lane_assignment=lane))
    out.sort(key=lambda e: e.id)
    return DynamicEnvironment(scenery.tick, tuple(out))


def assemble_scene(scenery: Scenery, dyn: DynamicEnvironment, self_rep: SelfRepresentation, tick: int) -> Scene:
    if scenery.tick != tick or dyn.tick != tick:
        raise ContractViolation(
            f"assemble_scene: inputs from ticks {scenery.tick}/{dyn.tick} for cycle {tick}",
            module="perception", tick=tick)
    masks = [e.provenance for e in scenery.elements] + [e.provenance for e in dyn.elements]
    extended = scenery.extended or (bool(masks) and MAP in join_all(masks))
    scene = Scene(tick, scenery.elements, dyn.elements, self_rep, extended)
    report = validate_scene(scene)
    if report:
        v = report[0]
        raise ContractViolation(f"invalid scene: {v.rule} ({v.element_id}) {v.detail}", module="perception", tick=tick)
    return scene
