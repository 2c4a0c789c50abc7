"""Trajectory candidates: quintic lateral offset over a route-aligned frame plus a speed profile."""
from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..config import StabilizationParams
from ..core.errors import ContractViolation
from ..core.geometry import Polyline, Pose2D, wrap_angles
from ..core.types import Maneuver, TargetPose


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Sampled states from t = 0; x, y, heading are in the frame the trajectory was planned in."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    speed: np.ndarray
    accel: np.ndarray
    cost: float = math.inf
    collision_free: bool = True
    lateral_sample: float = 0.0
    end_time: float = 0.0
    index: int = 0
    offset: Optional[np.ndarray] = None  # lateral coordinate along the reference line
    lat_accel: Optional[np.ndarray] = None
    tick: int = 0

    def __post_init__(self):
        t = np.asarray(self.t)
        if len(t) == 0 or abs(t[0]) > 1e-12 or np.any(np.diff(t) <= 0):
            raise ContractViolation("trajectory times must increase strictly from 0")
        if np.any(np.asarray(self.speed) < 0):
            raise ContractViolation("trajectory speeds must be non-negative")
        n = len(t)
        for name in ("x", "y", "heading", "speed", "accel"):
            if len(getattr(self, name)) != n:
                raise ContractViolation(f"trajectory field {name} has the wrong length")

    def __len__(self) -> int:
        return len(self.t)

    def with_cost(self, cost: float, collision_free: bool) -> "Trajectory":
        # fields were validated at construction; skip re-validation on this hot path
        out = copy.copy(self)
        object.__setattr__(out, "cost", cost)
        object.__setattr__(out, "collision_free", collision_free)
        return out

    def state_at(self, t: float) -> tuple[float, float]:
        """(speed, acceleration) at time t, linearly interpolated and held at the ends."""
        return float(np.interp(t, self.t, self.speed)), float(np.interp(t, self.t, self.accel))


# --- quintic -------------------------------------------------------------------

def quintic_coefficients(d0: float, v0: float, a0: float, d1: float, v1: float, a1: float, T: float) -> np.ndarray:
    """Coefficients c0..c5 of d(t) = sum c_k t^k meeting position/velocity/acceleration at 0 and T."""
    if T <= 0:
        raise ValueError("duration must be positive")
    c0, c1, c2 = d0, v0, a0 / 2.0
    A = np.array([[T ** 3, T ** 4, T ** 5],
                  [3 * T ** 2, 4 * T ** 3, 5 * T ** 4],
                  [6 * T, 12 * T ** 2, 20 * T ** 3]])
    b = np.array([d1 - (c0 + c1 * T + c2 * T ** 2),
                  v1 - (c1 + 2 * c2 * T),
                  a1 - 2 * c2])
    c3, c4, c5 = np.linalg.solve(A, b)
    return np.array([c0, c1, c2, c3, c4, c5])


def quintic_eval(c: np.ndarray, t, derivative: int = 0) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if derivative == 0:
        k = np.array([1, 1, 1, 1, 1, 1.0])
    elif derivative == 1:
        k = np.array([0, 1, 2, 3, 4, 5.0])
    elif derivative == 2:
        k = np.array([0, 0, 2, 6, 12, 20.0])
    else:
        raise ValueError("derivative must be 0, 1 or 2")
    powers = np.arange(6) - derivative
    out = np.zeros_like(t)
    for i in range(derivative, 6):
        out = out + k[i] * c[i] * t ** powers[i]
    return out


def lateral_profile(d0: float, v0: float, a0: float, d1: float, T: float, t: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quintic to (d1, 0, 0) at T, held constant afterwards."""
    c = quintic_coefficients(d0, v0, a0, d1, 0.0, 0.0, T)
    tc = np.minimum(t, T)
    d = quintic_eval(c, tc)
    dv = np.where(t <= T, quintic_eval(c, tc, 1), 0.0)
    da = np.where(t <= T, quintic_eval(c, tc, 2), 0.0)
    return d, dv, da


# --- speed profile ----------------------------------------------------------------

def _step(v: float, a: float, dt: float) -> tuple[float, float, float]:
    """Advance speed under constant acceleration, stopping at zero; returns (ds, v_next, a_used)."""
    if v + a * dt < 0.0:
        t_stop = v / -a if a < 0 else 0.0
        return v * t_stop / 2.0, 0.0, a
    return v * dt + 0.5 * a * dt * dt, v + a * dt, a


def speed_profile(v0: float, tp: TargetPose, s0: float, s_target: float, n: int, p: StabilizationParams,
                  cruise: Optional[float] = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Station, speed and acceleration samples for the maneuver in ``tp``.

    Stop maneuvers brake at the constant deceleration that ends exactly at the
    stop station once the comfortable deceleration no longer suffices;
    following tracks the lead with a gap-proportional speed command; all
    other maneuvers ramp to the target speed trapezoidally.
    """
    dt = p.dt
    s = np.zeros(n)
    v = np.zeros(n)
    a = np.zeros(n)
    s[0], v[0] = s0, v0
    stop = tp.maneuver in (Maneuver.STOP_AT_POINT, Maneuver.EMERGENCY_STOP)
    lead_speed = tp.linked_state.speed if tp.linked_state is not None else tp.target_speed
    if tp.maneuver == Maneuver.FOLLOW_VEHICLE and lead_speed < p.stopped_lead_speed:
        stop = True
    cap = tp.speed_cap if tp.speed_cap is not None else math.inf
    if cruise is None:
        cruise = max(v0, p.approach_speed)
    for i in range(n - 1):
        vi = v[i]
        if tp.maneuver == Maneuver.EMERGENCY_STOP:
            acc = -p.a_brake if vi > 0 else 0.0
        elif stop:
            rem = s_target - s[i]
            if rem <= p.stop_tolerance:
                acc = -p.a_brake if vi > 0 else 0.0
            else:
                need = vi * vi / (2.0 * rem)
                if need >= p.a_decel:
                    acc = -min(need, p.a_brake)
                else:
                    # approach: creep up to a speed that can still stop comfortably
                    v_ok = min(cruise, cap, math.sqrt(2.0 * p.a_decel * rem))
                    acc = _ramp(vi, v_ok, p)
        elif tp.maneuver == Maneuver.FOLLOW_VEHICLE:
            gap_err = s_target + lead_speed * (i * dt) - s[i]
            v_cmd = min(max(0.0, lead_speed + p.follow_gain * gap_err), cap, p.follow_max_speed)
            acc = _ramp(vi, v_cmd, p)
        else:
            acc = _ramp(vi, min(tp.target_speed, cap), p)
        ds, v[i + 1], a[i] = _step(vi, acc, dt)
        s[i + 1] = s[i] + ds
    a[-1] = a[-2] if n > 1 else 0.0
    if v[-1] <= 0.0:
        a[-1] = 0.0
    return s, v, a


def _ramp(v: float, v_goal: float, p: StabilizationParams) -> float:
    dv = v_goal - v
    if dv >= 0:
        return min(p.a_accel, dv / p.dt)
    return max(-p.a_decel, dv / p.dt)


# --- candidates -------------------------------------------------------------------

# below this speed the heading follows the reference line rather than the lateral rate
_MIN_SPEED = 0.5


def _time_grid(p: StabilizationParams) -> np.ndarray:
    n = int(round(p.horizon / p.dt)) + 1
    return np.arange(n) * p.dt


def _lateral_bundle(d0: float, v0: float, a0: float, d1: np.ndarray, T: float, t: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``lateral_profile`` for several end offsets at once; rows follow ``d1``."""
    c0, c1, c2 = d0, v0, a0 / 2.0
    A = np.array([[T ** 3, T ** 4, T ** 5],
                  [3 * T ** 2, 4 * T ** 3, 5 * T ** 4],
                  [6 * T, 12 * T ** 2, 20 * T ** 3]])
    rhs = np.stack([d1 - (c0 + c1 * T + c2 * T ** 2),
                    np.full(len(d1), -(c1 + 2 * c2 * T)),
                    np.full(len(d1), -2 * c2)])
    high = np.linalg.solve(A, rhs).T  # (k, 3)
    coef = np.hstack([np.tile([c0, c1, c2], (len(d1), 1)), high])  # (k, 6)
    tc = np.minimum(t, T)[:, None]
    e = np.arange(6)
    d = coef @ (tc ** e).T
    dv = coef[:, 1:] @ ((e[1:] * tc ** (e[1:] - 1)).T)
    da = coef[:, 2:] @ ((e[2:] * (e[2:] - 1) * tc ** (e[2:] - 2)).T)
    after = t > T
    dv[:, after] = 0.0
    da[:, after] = 0.0
    return d, dv, da


def generate_candidates(tp: TargetPose, ego: Pose2D, speed: float, params: Optional[StabilizationParams] = None,
                        lateral_state: tuple[float, float] = (0.0, 0.0), tick: int = 0) -> list[Trajectory]:
    """Seven lateral end offsets around the target times three end times.

    ``lateral_state`` carries the lateral velocity and acceleration of the
    previously selected candidate so consecutive plans join smoothly. An ego
    outside the corridor gets one straight recovery candidate instead.
    """
    p = params or StabilizationParams()
    line = Polyline(tp.reference_line)
    t = _time_grid(p)
    n = len(t)
    s0, d0 = line.project(ego.x, ego.y)
    s_t, d_t = line.project(tp.pose.x, tp.pose.y)
    s, v, a = speed_profile(speed, tp, s0, s_t, n, p)
    if not tp.corridor_contains(ego.x, ego.y):
        return [_recovery(line, ego, s0, s, v, a, t, p, tick)]
    rel = math.remainder(ego.heading - float(line.heading_at(s0)), 2 * math.pi)
    dv0 = speed * math.sin(rel) if speed > _MIN_SPEED else lateral_state[0]
    da0 = lateral_state[1]
    k = p.lateral_samples
    half = tp.sampling_ranges.lateral
    offsets = np.linspace(-half, half, k) if k > 1 else np.zeros(1)
    nominal, spread = tp.sampling_ranges.nominal_time, tp.sampling_ranges.temporal
    times = (nominal - spread, nominal, nominal + spread)
    base_heading = line.heading_at(s)
    v_floor = np.maximum(v, _MIN_SPEED)
    rows = {}
    for j, T in enumerate(times):
        d, dd, ddd = _lateral_bundle(d0, dv0, da0, d_t + offsets, T, t)
        x, y = line.frenet_to_xy(s, d)
        h = wrap_angles(base_heading + np.arctan2(dd, v_floor))
        for i in range(len(offsets)):
            rows[(i, j)] = (x[i], y[i], h[i], d[i], ddd[i])
    out = []
    idx = 0
    for i, off in enumerate(offsets):
        for j, T in enumerate(times):
            x, y, h, d, ddd = rows[(i, j)]
            out.append(Trajectory(t, x, y, h, v.copy(), a.copy(), lateral_sample=float(off), end_time=T,
                                  index=idx, offset=d, lat_accel=ddd, tick=tick))
            idx += 1
    return out


def _recovery(line: Polyline, ego: Pose2D, s0: float, s: np.ndarray, v: np.ndarray, a: np.ndarray, t: np.ndarray,
              p: StabilizationParams, tick: int) -> Trajectory:
    """Straight segment from the ego toward the centerline a few metres ahead."""
    aim = line.point_at(s0 + max(10.0, 2.0 * float(v[0])))
    h = math.atan2(aim[1] - ego.y, aim[0] - ego.x)
    dist = s - s[0]
    x = ego.x + dist * math.cos(h)
    y = ego.y + dist * math.sin(h)
    return Trajectory(t, x, y, np.full(len(t), h), v.copy(), a.copy(), index=0, lat_accel=np.zeros(len(t)), tick=tick)


def brake_trajectory(ego: Pose2D, speed: float, params: Optional[StabilizationParams] = None, tick: int = 0
                     ) -> Trajectory:
    """Straight-ahead full braking, the fallback when no candidate survives."""
    p = params or StabilizationParams()
    t = _time_grid(p)
    v = np.maximum(0.0, speed - p.a_brake * t)
    t_stop = speed / p.a_brake
    tc = np.minimum(t, t_stop)
    dist = speed * tc - 0.5 * p.a_brake * tc * tc
    a = np.where(t < t_stop, -p.a_brake, 0.0)
    x = ego.x + dist * math.cos(ego.heading)
    y = ego.y + dist * math.sin(ego.heading)
    return Trajectory(t, x, y, np.full(len(t), ego.heading), v, a, math.inf, False, tick=tick)


def transform_to_ego(traj: Trajectory, ego: Pose2D) -> Trajectory:
    """Express all states in the frame of ``ego``; costs and flags are unchanged."""
    pts = ego.to_local_array(np.stack([traj.x, traj.y], axis=1))
    h = wrap_angles(np.asarray(traj.heading) - ego.heading)
    return dataclasses.replace(traj, x=pts[:, 0], y=pts[:, 1], heading=h)


def transform_from_ego(traj: Trajectory, ego: Pose2D) -> Trajectory:
    pts = ego.to_parent_array(np.stack([traj.x, traj.y], axis=1))
    h = wrap_angles(np.asarray(traj.heading) + ego.heading)
    return dataclasses.replace(traj, x=pts[:, 0], y=pts[:, 1], heading=h)
