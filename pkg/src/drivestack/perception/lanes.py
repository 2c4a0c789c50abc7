"""Lane detection and tracking from marking samples.

Each lane hypothesis lives in the local stationary frame and keeps a fixed
fitting frame (origin + axis from the first observation). Centerline
coefficients in that frame are exponentially smoothed across cycles.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ..config import PerceptionParams
from ..core.geometry import Pose2D, wrap_angle
from ..core.provenance import MAP, VEH_ENV, ProvenanceMask
from ..localization.maps import LaneMap
from ..world.sensors import ExteroFrame

MIN_SAMPLES = 4
_REANCHOR_ANGLE = 0.2
_REANCHOR_DISTANCE = 60.0


@dataclass(frozen=True)
class LaneHypothesis:
    lane_id: int
    frame: Pose2D  # fitting frame in local coordinates
    coeffs: tuple[float, ...]  # centerline lateral offset as polynomial in frame x, highest power first
    x_range: tuple[float, float]
    width: float
    provenance: ProvenanceMask = VEH_ENV
    updates: int = 1
    road_id: Optional[int] = None
    left_id: Optional[int] = None
    right_id: Optional[int] = None
    successors: tuple[int, ...] = ()

    def centerline(self, step: float = 2.0) -> np.ndarray:
        x0, x1 = self.x_range
        n = max(2, int(math.ceil((x1 - x0) / step)) + 1)
        xs = np.linspace(x0, x1, n)
        ys = np.polyval(self.coeffs, xs)
        return self.frame.to_parent_array(np.stack([xs, ys], axis=1))


@dataclass(frozen=True)
class LaneTrackerState:
    hypotheses: tuple[LaneHypothesis, ...] = ()

    def by_id(self, lane_id: int) -> Optional[LaneHypothesis]:
        for h in self.hypotheses:
            if h.lane_id == lane_id:
                return h
        return None


def _principal_frame(pts: np.ndarray) -> Pose2D:
    c = pts.mean(axis=0)
    if len(pts) < 2:
        return Pose2D(float(c[0]), float(c[1]), 0.0)
    _, _, vt = np.linalg.svd(pts - c, full_matrices=False)
    axis = vt[0]
    return Pose2D(float(c[0]), float(c[1]), math.atan2(axis[1], axis[0]))


def _fit(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Quadratic least squares when the support allows it, else linear; always 3 coefficients."""
    deg = 2 if len(xs) >= 6 and np.ptp(xs) > 10.0 else 1
    # fit on centred, scaled abscissae for conditioning, then expand back to x
    m = float(xs.mean())
    sc = float(np.ptp(xs)) or 1.0
    u = (xs - m) / sc
    V = np.stack([u ** k for k in range(deg, -1, -1)], axis=1)
    cu = np.linalg.lstsq(V, ys, rcond=None)[0]
    a2, a1, a0 = np.concatenate([np.zeros(3 - len(cu)), cu])
    return np.array([a2 / sc ** 2, a1 / sc - 2 * a2 * m / sc ** 2, a2 * m * m / sc ** 2 - a1 * m / sc + a0])


def _measure(left: np.ndarray, right: np.ndarray, frame: Pose2D, width_prior: float):
    """Centerline coefficients, width and x-range of one observation in ``frame``."""
    ll = frame.to_local_array(left) if len(left) else left.reshape(0, 2)
    rl = frame.to_local_array(right) if len(right) else right.reshape(0, 2)
    fits = {}
    for name, pts in (("left", ll), ("right", rl)):
        if len(pts) >= 2:
            fits[name] = _fit(pts[:, 0], pts[:, 1])
    if not fits:
        return None
    xs = np.concatenate([ll[:, 0], rl[:, 0]])
    if "left" in fits and "right" in fits:
        center = 0.5 * (fits["left"] + fits["right"])
        grid = np.linspace(xs.min(), xs.max(), 16)
        width = float(np.mean(np.polyval(fits["left"], grid) - np.polyval(fits["right"], grid)))
    elif "left" in fits:
        center = fits["left"].copy()
        center[-1] -= width_prior / 2.0
        width = width_prior
    else:
        center = fits["right"].copy()
        center[-1] += width_prior / 2.0
        width = width_prior
    return center, width, (float(xs.min()), float(xs.max()))


def extract_track_lanes(frame: Optional[ExteroFrame], ego_pose: Pose2D, state: LaneTrackerState,
                        params: Optional[PerceptionParams] = None,
                        map_extract: Optional[LaneMap] = None) -> LaneTrackerState:
    """Fit and smooth one centerline per observed lane.

    ``ego_pose`` is the ego pose in the local frame at sensing time (this is
    where ego-motion compensation enters). Lanes with fewer than four marking
    samples yield no hypothesis this cycle. When a lane-level map extract is supplied the hypotheses borrow its
    topology and width and their provenance gains MAP.
    """
    p = params or PerceptionParams()
    alpha = p.lane_alpha
    old = {h.lane_id: h for h in state.hypotheses}
    # a dropped-out frame keeps every hypothesis; a real frame keeps only the lanes it saw
    new: dict[int, LaneHypothesis] = dict(old) if frame is None else {}
    if frame is not None:
        for sample in frame.lane_samples:
            left = np.asarray(sample.left, dtype=float).reshape(-1, 2)
            right = np.asarray(sample.right, dtype=float).reshape(-1, 2)
            if len(left) + len(right) < MIN_SAMPLES:
                continue
            left_l = ego_pose.to_parent_array(left) if len(left) else left
            right_l = ego_pose.to_parent_array(right) if len(right) else right
            prev = old.get(sample.lane_id)
            frame_pose = prev.frame if prev is not None else None
            obs_frame = _principal_frame(np.concatenate([left_l, right_l]))
            if frame_pose is not None:
                # keep the axis direction consistent with the stored frame before comparing
                if abs(wrap_angle(obs_frame.heading - frame_pose.heading)) > math.pi / 2:
                    obs_frame = Pose2D(obs_frame.x, obs_frame.y, obs_frame.heading + math.pi)
                if (abs(wrap_angle(obs_frame.heading - frame_pose.heading)) > _REANCHOR_ANGLE
                        or obs_frame.distance_to(frame_pose) > _REANCHOR_DISTANCE):
                    frame_pose = None
            if frame_pose is None:
                prev = None
                frame_pose = obs_frame
            m = _measure(left_l, right_l, frame_pose, prev.width if prev else 3.5)
            if m is None:
                continue
            coeffs, width, xr = m
            if prev is not None:
                coeffs = alpha * coeffs + (1 - alpha) * np.asarray(prev.coeffs)
                width = alpha * width + (1 - alpha) * prev.width
                updates = prev.updates + 1
            else:
                updates = 1
            new[sample.lane_id] = LaneHypothesis(
                lane_id=sample.lane_id, frame=frame_pose, coeffs=tuple(map(float, coeffs)),
                x_range=xr, width=float(width), provenance=VEH_ENV, updates=updates,
            )
    hyps = [new[k] for k in sorted(new)]
    if map_extract is not None:
        hyps = [_with_map(h, map_extract) for h in hyps]
    return LaneTrackerState(tuple(hyps))


def _with_map(h: LaneHypothesis, lanes: LaneMap) -> LaneHypothesis:
    lane = lanes.lane_by_id.get(h.lane_id)
    if lane is None:
        return h
    return replace(h, provenance=h.provenance | MAP, width=lane.width, road_id=lane.road_id,
                   left_id=lane.left_id, right_id=lane.right_id, successors=lane.successors)

