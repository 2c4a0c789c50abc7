"""Road-, lane- and feature-level maps and their JSON files."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

from ..core.codec import decode, encode
from ..core.errors import CodecError
from ..core.geometry import Point, Polyline
from ..core.provenance import ProvenanceMask


class FlowState(str, enum.Enum):
    FREE = "free"
    CONGESTED = "congested"
    BLOCKED = "blocked"


@dataclass(frozen=True)
class RoadNode:
    id: int
    x: float
    y: float


@dataclass(frozen=True)
class FlowOverlay:
    state: FlowState
    since_tick: int
    provenance: ProvenanceMask
    expires_tick: Optional[int] = None


@dataclass(frozen=True)
class RoadReport:
    """An observed flow state for one road edge."""

    edge_id: int
    state: FlowState
    tick: int
    provenance: ProvenanceMask
    mean_speed: Optional[float] = None


@dataclass(frozen=True)
class RoadEdge:
    id: int
    source: int
    target: int
    length: float
    speed_limit: float = 13.9
    lane_count: int = 1
    turn_angle: float = 0.0
    energy_factor: float = 1.0
    flow: Optional[FlowOverlay] = None

    def flow_state(self, tick: Optional[int] = None) -> FlowState:
        if self.flow is None:
            return FlowState.FREE
        if tick is not None and self.flow.expires_tick is not None and tick >= self.flow.expires_tick:
            return FlowState.FREE
        return self.flow.state


@dataclass(frozen=True)
class RoadNetworkMap:
    nodes: tuple[RoadNode, ...]
    edges: tuple[RoadEdge, ...]

    def __post_init__(self):
        ids = {n.id for n in self.nodes}
        if len(ids) != len(self.nodes):
            raise ValueError("duplicate node id")
        if len({e.id for e in self.edges}) != len(self.edges):
            raise ValueError("duplicate edge id")
        for e in self.edges:
            if e.source not in ids or e.target not in ids:
                raise ValueError(f"edge {e.id} references a missing node")
            if not e.length > 0:
                raise ValueError(f"edge {e.id} has non-positive length")

    @cached_property
    def node_by_id(self) -> dict[int, RoadNode]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def edge_by_id(self) -> dict[int, RoadEdge]:
        return {e.id: e for e in self.edges}

    @cached_property
    def out_edges(self) -> dict[int, list[RoadEdge]]:
        out: dict[int, list[RoadEdge]] = {n.id: [] for n in self.nodes}
        for e in sorted(self.edges, key=lambda e: e.id):
            out[e.source].append(e)
        return out

    def replace_edges(self, edges: dict[int, RoadEdge]) -> "RoadNetworkMap":
        return RoadNetworkMap(self.nodes, tuple(edges.get(e.id, e) for e in self.edges))

    def reachable(self, start: int, blocked: frozenset[int] = frozenset()) -> set[int]:
        seen = {start}
        stack = [start]
        while stack:
            n = stack.pop()
            for e in self.out_edges.get(n, []):
                if e.id in blocked or e.target in seen:
                    continue
                seen.add(e.target)
                stack.append(e.target)
        return seen


@dataclass(frozen=True)
class StopLine:
    id: int
    position: Point
    signal_id: Optional[int] = None


@dataclass(frozen=True)
class Lane:
    id: int
    road_id: int
    centerline: tuple[Point, ...]
    width: float = 3.5
    left_id: Optional[int] = None
    right_id: Optional[int] = None
    successors: tuple[int, ...] = ()
    marking_left: str = "solid"
    marking_right: str = "solid"
    stop_lines: tuple[StopLine, ...] = ()

    @cached_property
    def polyline(self) -> Polyline:
        return Polyline(self.centerline)


@dataclass(frozen=True)
class LaneMap:
    lanes: tuple[Lane, ...]

    def __post_init__(self):
        ids = {l.id for l in self.lanes}
        if len(ids) != len(self.lanes):
            raise ValueError("duplicate lane id")
        for l in self.lanes:
            for ref in (l.left_id, l.right_id, *l.successors):
                if ref is not None and ref not in ids:
                    raise ValueError(f"lane {l.id} references missing lane {ref}")

    @cached_property
    def lane_by_id(self) -> dict[int, Lane]:
        return {l.id: l for l in self.lanes}

    def lanes_of_road(self, road_id: int) -> list[Lane]:
        return [l for l in self.lanes if l.road_id == road_id]

    def check_roads(self, roads: RoadNetworkMap) -> list[str]:
        return [f"lane {l.id}: unknown road {l.road_id}" for l in self.lanes if l.road_id not in roads.edge_by_id]


@dataclass(frozen=True)
class Landmark:
    id: int
    x: float
    y: float
    tag: str = "pole"
    last_update_tick: int = 0


@dataclass(frozen=True)
class FeatureMap:
    landmarks: tuple[Landmark, ...] = ()

    def __post_init__(self):
        if len({l.id for l in self.landmarks}) != len(self.landmarks):
            raise ValueError("duplicate landmark id")
        for l in self.landmarks:
            if not (math.isfinite(l.x) and math.isfinite(l.y)):
                raise ValueError(f"landmark {l.id} has a non-finite position")


@dataclass(frozen=True)
class MapStack:
    roads: RoadNetworkMap
    lanes: LaneMap
    features: FeatureMap = field(default_factory=FeatureMap)

    def consistency_errors(self) -> list[str]:
        return self.lanes.check_roads(self.roads)


# --- files -----------------------------------------------------------------

def _edge_from_json(d: dict, nodes: dict[int, RoadNode], path: str) -> RoadEdge:
    d = dict(d)
    if "length" not in d:
        try:
            a, b = nodes[d["source"]], nodes[d["target"]]
        except KeyError as exc:
            raise CodecError(path, f"unknown node {exc.args[0]}") from None
        d["length"] = math.hypot(b.x - a.x, b.y - a.y)
    return decode(RoadEdge, d, path)


def roads_from_json(data: dict) -> RoadNetworkMap:
    if not isinstance(data, dict) or set(data) - {"nodes", "edges"}:
        raise CodecError("", "road map must be an object with 'nodes' and 'edges'")
    nodes = tuple(decode(RoadNode, n, f"nodes[{i}]") for i, n in enumerate(data.get("nodes", [])))
    by_id = {n.id: n for n in nodes}
    edges = tuple(_edge_from_json(e, by_id, f"edges[{i}]") for i, e in enumerate(data.get("edges", [])))
    try:
        return RoadNetworkMap(nodes, edges)
    except ValueError as exc:
        raise CodecError("", str(exc)) from None


def lanes_from_json(data: dict) -> LaneMap:
    try:
        return decode(LaneMap, data)
    except ValueError as exc:
        if isinstance(exc, CodecError):
            raise
        raise CodecError("", str(exc)) from None


def features_from_json(data: dict) -> FeatureMap:
    return decode(FeatureMap, data)


def map_to_json(m) -> dict:
    if isinstance(m, RoadNetworkMap):
        return {"nodes": encode(m.nodes), "edges": encode(m.edges)}
    return encode(m)


def load_maps(roads: Path, lanes: Path, features: Optional[Path] = None) -> MapStack:
    r = roads_from_json(json.loads(Path(roads).read_text(encoding="utf-8")))
    l = lanes_from_json(json.loads(Path(lanes).read_text(encoding="utf-8")))
    f = features_from_json(json.loads(Path(features).read_text(encoding="utf-8"))) if features else FeatureMap()
    return MapStack(r, l, f)


def save_maps(stack: MapStack, directory: Path, prefix: str = "") -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = {}
    for name, m in (("roads", stack.roads), ("lanes", stack.lanes), ("features", stack.features)):
        p = directory / f"{prefix}{name}.json"
        p.write_text(json.dumps(map_to_json(m), indent=1, sort_keys=True), encoding="utf-8")
        out[name] = p
    return out

