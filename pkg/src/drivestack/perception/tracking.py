"""Dynamic element tracking: constant-velocity Kalman filter per track,
greedy nearest-neighbour association inside a Mahalanobis gate."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from ..config import PerceptionParams
from ..core.geometry import Point
from ..core.provenance import VEH_ENV, ProvenanceMask
from ..core.types import Classification
from .ego_motion import EgoMotion


@dataclass(frozen=True)
class LocalDetection:
    """A detection already transformed into the local stationary frame."""

    position: Point
    extent: tuple[float, float] = (4.5, 1.8)
    heading: float = 0.0
    classification: Classification = Classification.VEHICLE_LIKE
    privacy: bool = False


@dataclass(frozen=True)
class Track:
    id: int
    mean: tuple[float, float, float, float]  # px, py, vx, vy
    covariance: tuple[tuple[float, ...], ...]
    age: int = 1
    hits: int = 1
    misses: int = 0
    extent: tuple[float, float] = (4.5, 1.8)
    heading: float = 0.0
    classification: Classification = Classification.VEHICLE_LIKE
    privacy: bool = False
    last_update_tick: int = 0
    provenance: ProvenanceMask = VEH_ENV
    confirmed: bool = False

    @property
    def position(self) -> Point:
        return (self.mean[0], self.mean[1])

    @property
    def velocity(self) -> Point:
        return (self.mean[2], self.mean[3])

    @property
    def speed(self) -> float:
        return math.hypot(self.mean[2], self.mean[3])

    @property
    def motion_heading(self) -> float:
        if self.speed > 0.5:
            return math.atan2(self.mean[3], self.mean[2])
        return self.heading

    def position_covariance(self) -> np.ndarray:
        return np.asarray(self.covariance, dtype=float)[:2, :2]


@dataclass(frozen=True)
class TrackSet:
    tick: int = 0
    tracks: tuple[Track, ...] = ()
    next_id: int = 1
    detections_seen: int = 0

    def by_id(self, track_id: int) -> Optional[Track]:
        for t in self.tracks:
            if t.id == track_id:
                return t
        return None

    def confirmed(self) -> list[Track]:
        return [t for t in self.tracks if t.confirmed]


def cv_matrices(dt: float, q: float) -> tuple[np.ndarray, np.ndarray]:
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    g = np.array([0.5 * dt * dt, dt])
    q1 = np.outer(g, g) * q * q
    Q = np.zeros((4, 4))
    Q[np.ix_([0, 2], [0, 2])] = q1
    Q[np.ix_([1, 3], [1, 3])] = q1
    return F, Q


H = np.hstack([np.eye(2), np.zeros((2, 2))])


def track_dynamic_elements(detections: Sequence[LocalDetection], tracks: TrackSet,
                           ego_motion: Optional[EgoMotion], dt: float,
                           params: Optional[PerceptionParams] = None, tick: Optional[int] = None) -> TrackSet:
    """One predict/associate/update cycle in the local stationary frame.

    Detections must already be ego-motion compensated; the ego-motion
    translation variance is added to each predicted position covariance since
    the local frame itself drifts by that much. Confirmation after ``confirm_hits`` associated detections, removal after
    ``drop_misses`` consecutive misses, unmatched detections start tentative
    tracks.
    """
    p = params or PerceptionParams()
    tick = tracks.tick + 1 if tick is None else tick
    F, Q = cv_matrices(dt, p.process_noise)
    R = np.eye(2) * p.measurement_sigma ** 2

    if ego_motion is not None and ego_motion.var_translation > 0:
        Q = Q.copy()
        Q[0, 0] += ego_motion.var_translation
        Q[1, 1] += ego_motion.var_translation

    means, covs = [], []
    for t in tracks.tracks:
        m = F @ np.asarray(t.mean)
        P = F @ np.asarray(t.covariance) @ F.T + Q
        means.append(m)
        covs.append(P)

    z = np.array([d.position for d in detections], dtype=float).reshape(-1, 2)
    pairs = []
    for i, (m, P) in enumerate(zip(means, covs)):
        S = H @ P @ H.T + R
        Sinv = np.linalg.inv(S)
        for j in range(len(z)):
            r = z[j] - m[:2]
            d2 = float(r @ Sinv @ r)
            if d2 <= p.gate ** 2:
                pairs.append((not tracks.tracks[i].confirmed, d2, tracks.tracks[i].id, i, j))
    # confirmed tracks claim detections before tentative ones
    pairs.sort()
    used_t, used_d = set(), set()
    assoc: dict[int, int] = {}
    for _, _, _, i, j in pairs:
        if i in used_t or j in used_d:
            continue
        used_t.add(i)
        used_d.add(j)
        assoc[i] = j

    out: list[Track] = []
    for i, t in enumerate(tracks.tracks):
        m, P = means[i], covs[i]
        if i in assoc:
            det = detections[assoc[i]]
            S = H @ P @ H.T + R
            K = P @ H.T @ np.linalg.inv(S)
            m = m + K @ (z[assoc[i]] - m[:2])
            I_KH = np.eye(4) - K @ H
            P = I_KH @ P @ I_KH.T + K @ R @ K.T  # Joseph form keeps P symmetric PSD
            hits, misses = t.hits + 1, 0
            extent, heading, cls, priv = det.extent, det.heading, det.classification, det.privacy
            last = tick
        else:
            hits, misses = t.hits, t.misses + 1
            extent, heading, cls, priv = t.extent, t.heading, t.classification, t.privacy
            last = t.last_update_tick
        if misses >= p.drop_misses:
            continue
        P = 0.5 * (P + P.T)
        out.append(replace(t, confirmed=t.confirmed or hits >= p.confirm_hits, mean=tuple(map(float, m)), covariance=tuple(map(tuple, P.tolist())),
                         age=t.age + 1, hits=hits, misses=misses, extent=extent, heading=heading,
                         classification=cls, privacy=priv, last_update_tick=last))

    next_id = tracks.next_id
    sv = p.initial_velocity_sigma ** 2
    sp = p.measurement_sigma ** 2
    for j, det in enumerate(detections):
        if j in used_d:
            continue
        out.append(Track(
            id=next_id,
            mean=(float(z[j, 0]), float(z[j, 1]), 0.0, 0.0),
            covariance=tuple(map(tuple, np.diag([sp, sp, sv, sv]).tolist())),
            extent=det.extent, heading=det.heading, classification=det.classification,
            privacy=det.privacy, last_update_tick=tick, confirmed=p.confirm_hits <= 1,
        ))
        next_id += 1
    return TrackSet(tick=tick, tracks=tuple(out), next_id=next_id,
                    detections_seen=tracks.detections_seen + len(detections))
