"""Abstract noisy sensors reading a ground-truth world snapshot.

Each sensor owns a counter-based random stream keyed by (seed, sensor id,
tick), so a reading is a pure function of the snapshot and the seed, and
adding or removing one sensor never shifts another sensor's noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
import shapely

from ..core.geometry import Point
from ..core.types import Classification, Health, LightColor
from ..localization.maps import Lane
from .sim import GroundTruthWorld

SENSOR_IDS = {"extero": 1, "proprio": 2, "gnss": 3, "v2x": 4}
COMPONENTS = ("steering", "brakes", "powertrain", "extero_sensor", "gnss_receiver")


class SensorStream:
    def __init__(self, seed: int, sensor: str):
        self.seed = int(seed)
        self.sensor = sensor
        self.code = SENSOR_IDS.get(sensor, sum(map(ord, sensor)) + 100)

    def at(self, tick: int) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed, self.code, int(tick)])
        return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class ExteroConfig:
    range: float = 80.0
    azimuth: float = math.pi
    sigma_det: float = 0.1
    sigma_lane: float = 0.0
    sigma_landmark: float = 0.05
    lane_step: float = 2.0
    static_step: float = 0.5
    light_misread: float = 0.0
    occlusion: bool = True


@dataclass(frozen=True)
class ProprioConfig:
    sigma_speed: float = 0.0
    sigma_yaw_rate: float = 0.0


@dataclass(frozen=True)
class GnssConfig:
    sigma: float = 0.5


@dataclass(frozen=True)
class SensorConfig:
    extero: ExteroConfig = field(default_factory=ExteroConfig)
    proprio: ProprioConfig = field(default_factory=ProprioConfig)
    gnss: GnssConfig = field(default_factory=GnssConfig)


@dataclass(frozen=True)
class Detection:
    position: Point
    extent: tuple[float, float]
    heading: float
    classification: Classification = Classification.VEHICLE_LIKE
    privacy: bool = False
    truth_id: Optional[int] = None


@dataclass(frozen=True)
class LaneSample:
    lane_id: int
    left: tuple[Point, ...]
    right: tuple[Point, ...]


@dataclass(frozen=True)
class LightObservation:
    light_id: int
    position: Point
    color: LightColor


@dataclass(frozen=True)
class StopLineObservation:
    stop_id: int
    position: Point
    lane_id: int
    signal_id: Optional[int] = None


@dataclass(frozen=True)
class LandmarkObservation:
    position: Point
    tag: str


@dataclass(frozen=True)
class ExteroFrame:
    tick: int
    detections: tuple[Detection, ...] = ()
    static_returns: tuple[Point, ...] = ()
    lane_samples: tuple[LaneSample, ...] = ()
    lights: tuple[LightObservation, ...] = ()
    landmarks: tuple[LandmarkObservation, ...] = ()
    stop_lines: tuple[StopLineObservation, ...] = ()


@dataclass(frozen=True)
class ProprioFrame:
    tick: int
    wheel_speed: float
    yaw_rate: Optional[float]
    steering_angle: float
    energy_level: float
    component_health: dict[str, Health]


@dataclass(frozen=True)
class GnssFix:
    tick: int
    x: float
    y: float
    sigma: float
    valid: bool


def in_fov(local: np.ndarray, cfg: ExteroConfig) -> np.ndarray:
    local = np.asarray(local, dtype=float).reshape(-1, 2)
    r = np.hypot(local[:, 0], local[:, 1])
    az = np.abs(np.arctan2(local[:, 1], local[:, 0]))
    return (r <= cfg.range) & (az <= cfg.azimuth + 1e-12)


@lru_cache(maxsize=4096)
def _lane_boundaries(lane: Lane, step: float) -> tuple[np.ndarray, np.ndarray]:
    line = lane.polyline
    n = max(2, int(math.floor(line.length / step)) + 1)
    s = np.arange(n) * step
    c = line.point_at(s)
    h = line.heading_at(s)
    normal = np.stack([-np.sin(h), np.cos(h)], axis=1) * (lane.width / 2)
    return c + normal, c - normal


def _occluders(world: GroundTruthWorld) -> list[tuple[str, shapely.Polygon]]:
    return [(name, shapely.Polygon(poly)) for name, poly in world.obstacle_polygons()]


def _visible(origin: Point, targets: np.ndarray, occluders, skip: list[str | None], pull_back: float = 0.05) -> np.ndarray:
    """Binary ray test: a target is hidden if the sensor ray crosses any occluder."""
    if len(targets) == 0 or not occluders:
        return np.ones(len(targets), dtype=bool)
    ox, oy = origin
    d = targets - (ox, oy)
    dist = np.hypot(d[:, 0], d[:, 1])
    scale = np.where(dist > pull_back, (dist - pull_back) / np.maximum(dist, 1e-12), 0.0)
    ends = np.stack([ox + d[:, 0] * scale, oy + d[:, 1] * scale], axis=1)
    lines = shapely.linestrings(np.stack([np.broadcast_to((ox, oy), ends.shape), ends], axis=1))
    visible = np.ones(len(targets), dtype=bool)
    for name, poly in occluders:
        hit = shapely.intersects(lines, poly)
        own = np.array([s == name for s in skip])
        visible &= ~(hit & ~own)
    return visible


def sense_environment(world: GroundTruthWorld, cfg: ExteroConfig, stream: SensorStream) -> Optional[ExteroFrame]:
    if world.fault_active("sensor_dropout", "extero"):
        return None
    rng = stream.at(world.tick)
    ego = world.ego.pose
    origin = ego.xy
    occluders = _occluders(world) if cfg.occlusion else []

    # dynamic agents
    dets = []
    agent_states = [(a, a.state_at(world.tick, world.dt)) for a in world.agents]
    if agent_states:
        centers = np.array([[s[0], s[1]] for _, s in agent_states])
        local = ego.to_local_array(centers)
        mask = in_fov(local, cfg)
        vis = _visible(origin, centers, occluders, [f"agent/{a.id}" for a, _ in agent_states])
        for (a, (x, y, h, _)), loc, ok, v in zip(agent_states, local, mask, vis):
            if not (ok and v):
                continue
            noise = rng.normal(0.0, cfg.sigma_det, 2) if cfg.sigma_det > 0 else np.zeros(2)
            dets.append(Detection(
                position=(float(loc[0] + noise[0]), float(loc[1] + noise[1])),
                extent=(a.length, a.width),
                heading=float(math.remainder(h - ego.heading, 2 * math.pi)),
                privacy=a.privacy,
                truth_id=a.id,
            ))

    # static obstacle surface returns
    returns: list[Point] = []
    for obst in world.static_obstacles:
        poly = np.asarray(obst.polygon, dtype=float)
        pts = _sample_boundary(poly, cfg.static_step)
        local = ego.to_local_array(pts)
        keep = in_fov(local, cfg)
        if not keep.any():
            continue
        vis = _visible(origin, pts[keep], occluders, [None] * int(keep.sum()))
        sel = local[keep][vis]
        if cfg.sigma_det > 0 and len(sel):
            sel = sel + rng.normal(0.0, cfg.sigma_det, sel.shape)
        returns.extend((float(p[0]), float(p[1])) for p in sel)

    # lane markings and painted stop lines
    samples = []
    stops = []
    if world.geometry_source is not None:
        for lane in sorted(world.geometry_source.lanes, key=lambda l: l.id):
            for sl in lane.stop_lines:
                loc = np.array(ego.to_local(*sl.position))
                if in_fov(loc, cfg)[0]:
                    if cfg.sigma_lane > 0:
                        loc = loc + rng.normal(0.0, cfg.sigma_lane, 2)
                    stops.append(StopLineObservation(sl.id, (float(loc[0]), float(loc[1])), lane.id, sl.signal_id))
            left, right = _lane_boundaries(lane, cfg.lane_step)
            ll, rl = ego.to_local_array(left), ego.to_local_array(right)
            ll, rl = ll[in_fov(ll, cfg)], rl[in_fov(rl, cfg)]
            if len(ll) == 0 and len(rl) == 0:
                continue
            if cfg.sigma_lane > 0:
                ll = ll + rng.normal(0.0, cfg.sigma_lane, ll.shape)
                rl = rl + rng.normal(0.0, cfg.sigma_lane, rl.shape)
            samples.append(LaneSample(lane.id, tuple(map(tuple, ll.tolist())), tuple(map(tuple, rl.tolist()))))

    # traffic lights
    lights = []
    for light in sorted(world.lights, key=lambda l: l.id):
        loc = np.array(ego.to_local(*light.position))
        if not in_fov(loc, cfg)[0]:
            continue
        color = light.color_at(world.tick)
        if cfg.light_misread > 0 and rng.random() < cfg.light_misread:
            others = [c for c in (LightColor.RED, LightColor.YELLOW, LightColor.GREEN) if c != color]
            color = others[int(rng.integers(len(others)))]
        lights.append(LightObservation(light.id, (float(loc[0]), float(loc[1])), color))

    # landmarks
    marks = []
    lms = sorted(world.landmarks.landmarks, key=lambda l: l.id)
    if lms:
        pts = np.array([[l.x, l.y] for l in lms])
        local = ego.to_local_array(pts)
        keep = in_fov(local, cfg)
        vis = _visible(origin, pts, occluders, [None] * len(pts)) if keep.any() else keep
        for l, loc, ok, v in zip(lms, local, keep, vis):
            if ok and v:
                n = rng.normal(0.0, cfg.sigma_landmark, 2) if cfg.sigma_landmark > 0 else np.zeros(2)
                marks.append(LandmarkObservation((float(loc[0] + n[0]), float(loc[1] + n[1])), l.tag))

    return ExteroFrame(world.tick, tuple(dets), tuple(returns), tuple(samples), tuple(lights), tuple(marks), tuple(stops))


def _sample_boundary(poly: np.ndarray, step: float) -> np.ndarray:
    out = []
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        n = max(1, int(math.ceil(math.hypot(*(b - a)) / step)))
        t = np.arange(n) / n
        out.append(a + (b - a) * t[:, None])
    return np.concatenate(out)


def sense_vehicle(world: GroundTruthWorld, cfg: ProprioConfig, stream: SensorStream) -> Optional[ProprioFrame]:
    if world.fault_active("sensor_dropout", "proprio"):
        return None
    rng = stream.at(world.tick)
    ego = world.ego
    yaw_rate = ego.speed * math.tan(ego.steering_angle) / ego.wheelbase
    nv, nw = rng.normal(0.0, 1.0, 2)
    speed = ego.speed + cfg.sigma_speed * nv
    yr: Optional[float] = yaw_rate + cfg.sigma_yaw_rate * nw
    if world.fault_active("sensor_dropout", "yaw_rate"):
        yr = None
    health = {c: world.health_at(c) for c in COMPONENTS}
    return ProprioFrame(world.tick, float(speed), yr, ego.steering_angle, world.energy_level, health)


def sense_gnss(world: GroundTruthWorld, cfg: GnssConfig, stream: SensorStream) -> Optional[GnssFix]:
    if world.fault_active("sensor_dropout", "gnss"):
        return None
    rng = stream.at(world.tick)
    n = rng.normal(0.0, 1.0, 2) * cfg.sigma
    valid = not world.fault_active("gnss_outage")
    p = world.ego.pose
    return GnssFix(world.tick, float(p.x + n[0]), float(p.y + n[1]), cfg.sigma, valid)
