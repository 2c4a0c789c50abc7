"""Road-level environment model: the road graph piped through with flow states."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Sequence

from ..config import PerceptionParams
from ..core.provenance import MAP, ProvenanceMask, join_all
from ..core.types import DynamicElement
from ..localization.maps import FlowOverlay, FlowState, LaneMap, RoadNetworkMap, RoadReport


@dataclass(frozen=True)
class RoadLevelModel:
    roads: RoadNetworkMap
    reports: tuple[RoadReport, ...]
    provenance: ProvenanceMask


def observed_edge_speeds(elements: Sequence[DynamicElement], lanes: LaneMap) -> dict[int, tuple[float, ProvenanceMask]]:
    """Mean speed of lane-assigned elements per road edge, with the joined provenance."""
    speeds: dict[int, list[float]] = {}
    masks: dict[int, list[ProvenanceMask]] = {}
    for e in elements:
        if e.lane_assignment is None:
            continue
        lane = lanes.lane_by_id.get(e.lane_assignment)
        if lane is None:
            continue
        speeds.setdefault(lane.road_id, []).append(e.velocity)
        masks.setdefault(lane.road_id, []).append(e.provenance)
    return {k: (sum(v) / len(v), join_all(masks[k])) for k, v in sorted(speeds.items())}


def model_road_level(roads: RoadNetworkMap, lanes: Optional[LaneMap], observations: Sequence[DynamicElement],
                     v2x_reports: Sequence[RoadReport], tick: int,
                     params: Optional[PerceptionParams] = None) -> RoadLevelModel:
    """Overlay flow states on the road graph.

    Observed mean speed below ``congestion_ratio`` times the edge limit marks
    the edge congested; V2X reports overlay their own state. With nothing to
    overlay the graph passes through untouched.
    """
    p = params or PerceptionParams()
    reports: list[RoadReport] = []
    if lanes is not None:
        for edge_id, (speed, mask) in observed_edge_speeds(observations, lanes).items():
            edge = roads.edge_by_id.get(edge_id)
            if edge is None:
                continue
            state = FlowState.CONGESTED if speed < p.congestion_ratio * edge.speed_limit else FlowState.FREE
            reports.append(RoadReport(edge_id, state, tick, mask | MAP, speed))
    for r in v2x_reports:
        if r.edge_id in roads.edge_by_id:
            reports.append(r)
    if not reports:
        return RoadLevelModel(roads, (), MAP)
    updates = {}
    for r in reports:
        # later reports (V2X after onboard) win for the same edge
        updates[r.edge_id] = dataclasses.replace(
            roads.edge_by_id[r.edge_id], flow=FlowOverlay(r.state, r.tick, r.provenance | MAP))
    prov = join_all([MAP] + [r.provenance for r in reports])
    return RoadLevelModel(roads.replace_edges(updates), tuple(reports), prov)
