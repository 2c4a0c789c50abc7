"""Low-level control, stabilization execution monitoring and the low-latency target refresh."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..config import StabilizationParams, VehicleParams
from ..core.geometry import Polyline, Pose2D
from ..core.types import (Auxiliary, ExecutionReport, LinkedState, Maneuver, Reason, Status, TargetPose,
                          nominal)
from ..perception.tracking import TrackSet
from ..world.sim import ActuatorCommand
from .trajectory import Trajectory


_RUNOUT = 50.0


def lookahead_distance(speed: float, p: StabilizationParams) -> float:
    return max(p.lookahead_min, p.lookahead_gain * speed)


def trajectory_path(traj: Trajectory) -> Polyline:
    pts = np.stack([traj.x, traj.y], axis=1)
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.hypot(*np.diff(pts, axis=0).T) > 1e-6
    pts = pts[keep]
    # run out along the final heading so a lookahead past the end (short or
    # stationary plans) still points forward
    h = float(traj.heading[-1])
    pts = np.vstack([pts, pts[-1:] + _RUNOUT * np.array([math.cos(h), math.sin(h)])])
    return Polyline(pts)


def pure_pursuit(path: Polyline, lookahead: float, wheelbase: float, ego: Optional[Pose2D] = None) -> float:
    """Steering angle toward the point ``lookahead`` metres along the path from the ego.

    Without ``ego`` the path is already in the ego frame (origin, heading 0).
    """
    ex, ey = (ego.x, ego.y) if ego is not None else (0.0, 0.0)
    s0, _ = path.project(ex, ey)
    gx, gy = path.point_at(s0 + lookahead)
    if ego is not None:
        gx, gy = ego.to_local(float(gx), float(gy))
    alpha = math.atan2(gy, gx)
    dist = math.hypot(gx, gy)
    return math.atan2(2.0 * wheelbase * math.sin(alpha), max(dist, 1e-6))


def compute_control(traj: Optional[Trajectory], speed: float, elapsed: float,
                    params: Optional[StabilizationParams] = None, vehicle: Optional[VehicleParams] = None,
                    auxiliary: frozenset[Auxiliary] = frozenset(), feedforward: bool = True,
                    tick: int = 0, ego: Optional[Pose2D] = None, path: Optional[Polyline] = None
                    ) -> tuple[ActuatorCommand, ExecutionReport]:
    """Actuator command from an ego-frame trajectory.

    Steering is pure pursuit on the lookahead point; acceleration is the
    planned acceleration at ``elapsed`` seconds into the trajectory (when
    ``feedforward``) plus k_v times the speed error, saturated. An empty
    trajectory yields full braking and a failed report. When ``ego`` is given
    the trajectory is in the frame of that pose instead of the ego frame;
    ``path`` may carry a precomputed ``trajectory_path``.
    """
    p = params or StabilizationParams()
    vehicle = vehicle or VehicleParams()
    if traj is None or len(traj) == 0:
        cmd = ActuatorCommand(0.0, -p.a_limit, auxiliary)
        return cmd, ExecutionReport("stabilization", tick, Status.FAILED, Reason.COMPONENT_FAILED,
                                    component="trajectory")
    path = path if path is not None else trajectory_path(traj)
    steer = pure_pursuit(path, lookahead_distance(speed, p), vehicle.wheelbase, ego)
    v_ref, a_ff = traj.state_at(elapsed)
    acc = (a_ff if feedforward else 0.0) + p.k_v * (v_ref - speed)
    acc = max(-p.a_limit, min(p.a_limit, acc))
    if v_ref <= 0.0 and speed <= 0.05:
        acc = min(acc, 0.0)
    return ActuatorCommand(float(steer), float(acc), auxiliary), nominal("stabilization", tick)


# --- monitoring ---------------------------------------------------------------------

@dataclass(frozen=True)
class DeviationMonitor:
    count: int = 0
    max_lateral: float = 0.0
    max_speed: float = 0.0


def tracking_deviation(traj: Trajectory, ego: Pose2D, speed: float, elapsed: float,
                       path: Optional[Polyline] = None) -> tuple[float, float]:
    """(lateral distance to the planned path, |planned speed - speed|), both in the trajectory's frame."""
    path = path if path is not None else trajectory_path(traj)
    _, d = path.project(ego.x, ego.y)
    v_ref, _ = traj.state_at(elapsed)
    return abs(d), abs(v_ref - speed)


def monitor_stabilization(lateral: float, speed_dev: float, state: DeviationMonitor, tick: int,
                          params: Optional[StabilizationParams] = None
                          ) -> tuple[ExecutionReport, DeviationMonitor]:
    """Degraded once either deviation has exceeded its threshold for ``deviation_cycles`` consecutive cycles."""
    p = params or StabilizationParams()
    bad = lateral > p.max_lateral_deviation or speed_dev > p.max_speed_deviation
    count = state.count + 1 if bad else 0
    new = DeviationMonitor(count, max(state.max_lateral, lateral), max(state.max_speed, speed_dev))
    if count >= p.deviation_cycles:
        return ExecutionReport("stabilization", tick, Status.DEGRADED, Reason.CONTROL_DEVIATION_EXCEEDED), new
    return nominal("stabilization", tick), new


# --- low-latency refresh -------------------------------------------------------------

def refresh_target_features(poses: Sequence[TargetPose], tracks: TrackSet, tick: Optional[int] = None
                            ) -> tuple[tuple[TargetPose, ...], list[ExecutionReport]]:
    """Update follow_vehicle targets from the newest track states, bypassing scene modelling.

    The target pose moves by the displacement of the linked track since its
    last recorded state. A linked track that no longer exists turns the
    target into a stop at its last pose, with a degraded report.
    """
    tick = tracks.tick if tick is None else tick
    out = []
    reports = []
    for tp in poses:
        if tp.maneuver != Maneuver.FOLLOW_VEHICLE or tp.linked_element is None:
            out.append(tp)
            continue
        tr = tracks.by_id(tp.linked_element)
        if tr is None or not tr.confirmed:
            out.append(TargetPose(tp.pose, 0.0, tp.corridor, tp.reference_line, Maneuver.STOP_AT_POINT,
                                  tp.sampling_ranges, tp.deviation_costs, speed_cap=tp.speed_cap))
            reports.append(ExecutionReport("stabilization", tick, Status.DEGRADED, Reason.LINKED_ELEMENT_LOST,
                                           location=tp.pose.xy))
            continue
        old = tp.linked_state
        x, y = tr.position
        dx, dy = (x - old.x, y - old.y) if old is not None else (0.0, 0.0)
        pose = Pose2D(tp.pose.x + dx, tp.pose.y + dy, tp.pose.heading)
        if not tp.corridor_contains(pose.x, pose.y):
            line = Polyline(tp.reference_line)
            s, _ = line.project(pose.x, pose.y)
            s = min(max(s, 0.0), line.length)
            px, py = line.point_at(s)
            pose = Pose2D(float(px), float(py), float(line.heading_at(s)))
            if not tp.corridor_contains(pose.x, pose.y):
                pose = tp.pose
        linked = LinkedState(x, y, tr.speed, tr.motion_heading, tracks.tick)
        out.append(dataclasses.replace(tp, pose=pose, linked_state=linked, target_speed=tr.speed))
    return tuple(out), reports
