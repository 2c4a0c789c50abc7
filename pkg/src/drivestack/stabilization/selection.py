"""Candidate assessment: corridor containment, swept-footprint collision checks, cost and argmin."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import shapely

from ..config import StabilizationParams, VehicleParams
from ..core.geometry import Point, Polyline, convex_overlap, footprints
from ..core.types import DeviationCosts, ExecutionReport, Reason, Status, TargetPose
from .trajectory import Trajectory


@dataclass(frozen=True, eq=False)
class MovingObstacle:
    """Convex polygon moving at constant velocity from t = 0."""

    polygon: np.ndarray
    velocity: tuple[float, float] = (0.0, 0.0)
    element_id: object = None

    def at(self, t: np.ndarray) -> np.ndarray:
        """(len(t), N, 2) polygon positions."""
        v = np.asarray(self.velocity, dtype=float)
        return self.polygon[None, :, :] + np.asarray(t, dtype=float)[:, None, None] * v

    @property
    def centroid(self) -> Point:
        c = np.asarray(self.polygon).mean(axis=0)
        return (float(c[0]), float(c[1]))


@dataclass(frozen=True)
class SelectionResult:
    trajectory: Optional[Trajectory]
    assessed: tuple[Trajectory, ...]
    report: ExecutionReport
    blocked_by: Optional[Point] = None


class CorridorShape:
    """Union of the corridor pieces, prepared for vectorised point containment."""

    def __init__(self, corridor: Sequence[Sequence[Point]]):
        self.key = corridor
        groups: dict[int, list[np.ndarray]] = {}
        for p in corridor:
            p = np.asarray(p, dtype=float)
            groups.setdefault(len(p), []).append(p)
        parts = np.concatenate([shapely.polygons(np.stack(g)) for g in groups.values()])
        self.geom = shapely.union_all(parts).buffer(1e-6)
        shapely.prepare(self.geom)

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return shapely.contains_xy(self.geom, x, y)


_corridor_cache: dict[int, CorridorShape] = {}


def corridor_shape(tp: TargetPose) -> CorridorShape:
    key = id(tp.corridor)
    hit = _corridor_cache.get(key)
    if hit is None or hit.key is not tp.corridor:
        if len(_corridor_cache) > 32:
            _corridor_cache.clear()
        hit = CorridorShape(tp.corridor)
        _corridor_cache[key] = hit
    return hit


def trajectory_cost(traj: Trajectory, target_offset: float, target_speed: float, weights: DeviationCosts,
                    p: StabilizationParams) -> float:
    dt = p.dt
    lat = 0.0 if traj.offset is None else float(np.sum((traj.offset - target_offset) ** 2) * dt)
    lat_acc = 0.0 if traj.lat_accel is None else np.asarray(traj.lat_accel)
    acc = float(np.sum(np.asarray(traj.accel) ** 2 + lat_acc ** 2) * dt)
    dev = abs(float(traj.speed[-1]) - target_speed)
    return weights.lateral * p.w_lat * lat + p.w_acc * acc + weights.speed * p.w_dev * dev


def swept_footprints(traj: Trajectory, vehicle: VehicleParams) -> np.ndarray:
    return footprints(np.asarray(traj.x), np.asarray(traj.y), np.asarray(traj.heading), vehicle.length,
                      vehicle.width, vehicle.rear_overhang)


def collision_mask(fp: np.ndarray, t: np.ndarray, static: Sequence[np.ndarray],
                   moving: Sequence[MovingObstacle], probe: int = 0) -> tuple[np.ndarray, Optional[int]]:
    """Per-candidate collision flags for footprints (C, T, 4, 2); also the first obstacle hit by ``probe``."""
    C = fp.shape[0]
    hit = np.zeros(C, dtype=bool)
    first = None
    obstacles: list[np.ndarray] = []  # each (T, N, 2)
    for poly in static:
        obstacles.append(np.broadcast_to(np.asarray(poly, dtype=float)[None], (len(t),) + np.shape(poly)))
    for m in moving:
        obstacles.append(m.at(t))
    for k, ob in enumerate(obstacles):
        # cheap bounding-circle prefilter before the separating-axis test
        oc = ob.mean(axis=1)
        orad = np.max(np.hypot(*(ob - oc[:, None, :]).transpose(2, 0, 1)), axis=1)
        fc = fp.mean(axis=2)
        near = np.hypot(fc[..., 0] - oc[None, :, 0], fc[..., 1] - oc[None, :, 1]) <= orad[None] + 3.0
        if not near.any():
            continue
        ci, ti = np.nonzero(near)
        overlap = convex_overlap(fp[ci, ti], ob[ti])
        mine = np.zeros(C, dtype=bool)
        np.logical_or.at(mine, ci[overlap], True)
        if first is None and mine[probe]:
            first = k
        hit |= mine
    return hit, first


def select_trajectory(cands: Sequence[Trajectory], tp: TargetPose, static: Sequence[np.ndarray] = (),
                      moving: Sequence[MovingObstacle] = (), params: Optional[StabilizationParams] = None,
                      vehicle: Optional[VehicleParams] = None, tick: int = 0,
                      target_offset: Optional[float] = None) -> SelectionResult:
    """Discard candidates leaving the corridor or touching an obstacle, then take the cheapest.

    Ties go to the smaller absolute lateral sample, then to the lower index.
    When nothing survives the result carries no trajectory and a degraded
    no_collision_free_trajectory report locating the blocking obstacle.
    """
    if not cands:
        raise ValueError("select_trajectory needs at least one candidate")
    p = params or StabilizationParams()
    vehicle = vehicle or VehicleParams()
    if target_offset is None:
        target_offset = Polyline(tp.reference_line).project(tp.pose.x, tp.pose.y)[1]
    fp = footprints(np.stack([c.x for c in cands]), np.stack([c.y for c in cands]),
                    np.stack([c.heading for c in cands]), vehicle.length, vehicle.width,
                    vehicle.rear_overhang)  # (C, T, 4, 2)
    shape = corridor_shape(tp)
    inside = shape.contains(fp[..., 0].ravel(), fp[..., 1].ravel()).reshape(fp.shape[:3]).all(axis=(1, 2))
    probe = min(range(len(cands)), key=lambda i: (abs(cands[i].lateral_sample), i))
    hit, first = collision_mask(fp, np.asarray(cands[0].t), static, moving, probe)
    assessed = []
    for i, c in enumerate(cands):
        free = bool(inside[i] and not hit[i])
        cost = trajectory_cost(c, target_offset, tp.target_speed, tp.deviation_costs, p)
        assessed.append(c.with_cost(cost, free))
    survivors = [c for c in assessed if c.collision_free]
    if not survivors:
        blocked = None
        obstacles = list(static) + [m.polygon for m in moving]
        if first is not None:
            c = np.asarray(obstacles[first]).mean(axis=0)
            blocked = (float(c[0]), float(c[1]))
        elif obstacles and hit.any():
            blocked = _nearest_centroid(obstacles, cands[probe])
        rep = ExecutionReport("stabilization", tick, Status.DEGRADED, Reason.NO_COLLISION_FREE_TRAJECTORY,
                              location=blocked)
        return SelectionResult(None, tuple(assessed), rep, blocked)
    best = min(survivors, key=lambda c: (c.cost, abs(c.lateral_sample), c.index))
    return SelectionResult(best, tuple(assessed), ExecutionReport("stabilization", tick, Status.NOMINAL), None)


def _nearest_centroid(obstacles: Sequence[np.ndarray], traj: Trajectory) -> Point:
    x0, y0 = float(traj.x[0]), float(traj.y[0])
    cs = [np.asarray(o).mean(axis=0) for o in obstacles]
    c = min(cs, key=lambda c: math.hypot(c[0] - x0, c[1] - y0))
    return (float(c[0]), float(c[1]))
