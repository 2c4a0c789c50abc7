"""Global pose fusion (odometry + GNSS) and landmark-based map-relative pose."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..config import LocalizationParams
from ..core.errors import ContractViolation
from ..core.geometry import Point, Pose2D
from ..core.provenance import MAP, VEH, VEH_ENV, ProvenanceMask
from ..perception.ego_motion import EgoMotion
from ..world.sensors import GnssFix
from .maps import FeatureMap

Cov3 = tuple[tuple[float, float, float], tuple[float, float, float], tuple[float, float, float]]


def _cov(a: np.ndarray) -> Cov3:
    a = 0.5 * (a + a.T)
    return tuple(tuple(float(v) for v in row) for row in a)  # type: ignore[return-value]


def _check_psd(c: np.ndarray, what: str) -> None:
    if not np.allclose(c, c.T, atol=1e-12) or np.linalg.eigvalsh(0.5 * (c + c.T)).min() < -1e-9:
        raise ContractViolation(f"{what} covariance is not symmetric PSD", module="localization")


@dataclass(frozen=True)
class GlobalPose:
    pose: Pose2D
    covariance: Cov3
    tick: int = 0
    provenance: ProvenanceMask = VEH

    def cov(self) -> np.ndarray:
        return np.asarray(self.covariance, dtype=float)


@dataclass(frozen=True)
class MapRelativePose:
    pose: Pose2D
    covariance: Cov3
    matched: int
    tick: int = 0
    provenance: ProvenanceMask = VEH_ENV | MAP

    def cov(self) -> np.ndarray:
        return np.asarray(self.covariance, dtype=float)

    @property
    def uncertainty(self) -> float:
        return float(np.trace(self.cov()))


def initial_global_pose(pose: Pose2D, sigma_xy: float = 0.5, sigma_heading: float = 0.01, tick: int = 0) -> GlobalPose:
    return GlobalPose(pose, _cov(np.diag([sigma_xy ** 2, sigma_xy ** 2, sigma_heading ** 2])), tick)


def fuse_global_pose(fix: Optional[GnssFix], motion: EgoMotion, prior: GlobalPose,
                     params: Optional[LocalizationParams] = None, tick: Optional[int] = None) -> GlobalPose:
    """Extended Kalman step on (x, y, heading).

    Prediction composes the prior with the ego motion and adds the motion
    noise (the motion's own variances plus a distance-proportional term).
    A valid fix then updates position by Gaussian fusion; without one the
    prediction is returned.
    """
    p = params or LocalizationParams()
    P = prior.cov()
    _check_psd(P, "prior")
    th = prior.pose.heading
    c, s = math.cos(th), math.sin(th)
    pred = prior.pose.compose(motion.as_pose())
    J = np.array([[1.0, 0.0, -s * motion.dx - c * motion.dy],
                  [0.0, 1.0, c * motion.dx - s * motion.dy],
                  [0.0, 0.0, 1.0]])
    dist = math.hypot(motion.dx, motion.dy)
    q_t = motion.var_translation + (p.motion_sigma * dist) ** 2
    q_h = motion.var_heading + (p.heading_sigma * abs(motion.dheading)) ** 2
    R = np.array([[c, -s], [s, c]])
    Q = np.zeros((3, 3))
    Q[:2, :2] = R @ np.diag([q_t, q_t]) @ R.T
    Q[2, 2] = q_h
    P = J @ P @ J.T + Q
    mean = np.array([pred.x, pred.y, pred.heading])
    prov = prior.provenance | motion.provenance
    if fix is not None and fix.valid:
        H = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        S = H @ P @ H.T + np.eye(2) * fix.sigma ** 2
        K = P @ H.T @ np.linalg.inv(S)
        mean = mean + K @ (np.array([fix.x, fix.y]) - mean[:2])
        I_KH = np.eye(3) - K @ H
        P = I_KH @ P @ I_KH.T + K @ (np.eye(2) * fix.sigma ** 2) @ K.T
    return GlobalPose(Pose2D(float(mean[0]), float(mean[1]), float(mean[2])), _cov(P),
                      prior.tick if tick is None else tick, prov)


def associate_landmarks(observed_map: np.ndarray, fmap: FeatureMap, radius: float) -> list[tuple[int, int]]:
    """Greedy one-to-one nearest association, (observation index, landmark index)."""
    lms = fmap.landmarks
    if len(observed_map) == 0 or not lms:
        return []
    L = np.array([[l.x, l.y] for l in lms])
    d = np.hypot(observed_map[:, None, 0] - L[None, :, 0], observed_map[:, None, 1] - L[None, :, 1])
    cand = [(d[i, j], lms[j].id, i, j) for i, j in zip(*np.nonzero(d <= radius))]
    cand.sort()
    used_o, used_l, out = set(), set(), []
    for _, _, i, j in cand:
        if i in used_o or j in used_l:
            continue
        used_o.add(i)
        used_l.add(j)
        out.append((int(i), int(j)))
    return sorted(out)


def rigid_fit(src: np.ndarray, dst: np.ndarray) -> tuple[float, np.ndarray]:
    """Rotation angle and translation minimising sum |R src + t - dst|^2."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - cs, dst - cd
    num = float(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
    den = float(np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]))
    ang = math.atan2(num, den)
    c, s = math.cos(ang), math.sin(ang)
    t = cd - np.array([c * cs[0] - s * cs[1], s * cs[0] + c * cs[1]])
    return ang, t


def match_map_relative_pose(global_pose: GlobalPose, observations: Sequence[Point], fmap: FeatureMap,
                            params: Optional[LocalizationParams] = None,
                            tick: Optional[int] = None) -> MapRelativePose:
    """Correct the global pose by aligning observed landmarks (ego frame) with the feature map.

    One match corrects translation only; two or more give a full rigid fit.
    Without matches the global pose is returned with inflated uncertainty.
    """
    p = params or LocalizationParams()
    tick = global_pose.tick if tick is None else tick
    obs = np.asarray(observations, dtype=float).reshape(-1, 2)
    in_map = global_pose.pose.to_parent_array(obs) if len(obs) else obs
    pairs = associate_landmarks(in_map, fmap, p.association_radius)
    if not pairs:
        return MapRelativePose(global_pose.pose, _cov(global_pose.cov() * p.unmatched_inflation), 0, tick)
    src = obs[[i for i, _ in pairs]]
    dst = np.array([[fmap.landmarks[j].x, fmap.landmarks[j].y] for _, j in pairs])
    n = len(pairs)
    var_t = p.observation_sigma ** 2 / n
    if n == 1:
        heading = global_pose.pose.heading
        c, s = math.cos(heading), math.sin(heading)
        rotated = np.array([c * src[0, 0] - s * src[0, 1], s * src[0, 0] + c * src[0, 1]])
        t = dst[0] - rotated
        var_h = global_pose.cov()[2, 2]
    else:
        heading, t = rigid_fit(src, dst)
        spread = float(np.sum((src - src.mean(axis=0)) ** 2))
        var_h = p.observation_sigma ** 2 / max(spread, 1e-6)
    cov = np.diag([var_t, var_t, var_h])
    return MapRelativePose(Pose2D(float(t[0]), float(t[1]), heading), _cov(cov), n, tick)
