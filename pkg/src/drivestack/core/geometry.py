"""Planar geometry shared by every module: poses, polylines, convex polygons."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractViolation

Point = tuple[float, float]


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    w = math.remainder(a, 2.0 * math.pi)
    if w <= -math.pi:
        w += 2.0 * math.pi
    return w


def wrap_angles(a: np.ndarray) -> np.ndarray:
    w = np.remainder(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w <= -np.pi, w + 2.0 * np.pi, w)


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.heading)):
            raise ContractViolation(f"non-finite pose ({self.x}, {self.y}, {self.heading})")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))

    @property
    def xy(self) -> Point:
        return (self.x, self.y)

    def compose(self, other: "Pose2D") -> "Pose2D":
        """self ⊕ other: `other` expressed in self's frame, returned in the parent frame."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        return Pose2D(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.heading + other.heading,
        )

    def inverse(self) -> "Pose2D":
        c, s = math.cos(self.heading), math.sin(self.heading)
        return Pose2D(-c * self.x - s * self.y, s * self.x - c * self.y, -self.heading)

    def to_local(self, px: float, py: float) -> Point:
        """Parent-frame point -> this pose's frame."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        dx, dy = px - self.x, py - self.y
        return (c * dx + s * dy, -s * dx + c * dy)

    def to_parent(self, px: float, py: float) -> Point:
        c, s = math.cos(self.heading), math.sin(self.heading)
        return (self.x + c * px - s * py, self.y + s * px + c * py)

    def to_local_array(self, pts: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        d = np.asarray(pts, dtype=float) - (self.x, self.y)
        return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)

    def to_parent_array(self, pts: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        p = np.asarray(pts, dtype=float)
        return np.stack([self.x + c * p[..., 0] - s * p[..., 1], self.y + s * p[..., 0] + c * p[..., 1]], axis=-1)

    def distance_to(self, other: "Pose2D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


class Polyline:
    """Arc-length parameterized polyline with projection and sampling."""

    def __init__(self, points: Sequence[Point] | np.ndarray):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if len(pts) >= 2:
            keep = np.ones(len(pts), dtype=bool)
            keep[1:] = np.hypot(*np.diff(pts, axis=0).T) > 1e-9
            pts = pts[keep]
        if len(pts) < 2:
            raise ValueError("polyline needs at least two distinct points")
        self.points = pts
        seg = np.diff(pts, axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.seg_dir = seg / self.seg_len[:, None]
        self.s = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.seg_heading = np.arctan2(self.seg_dir[:, 1], self.seg_dir[:, 0])
        self._last_projection: Optional[tuple[tuple[float, float], tuple[float, float]]] = None

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def _seg_index(self, s: np.ndarray) -> np.ndarray:
        return np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.seg_len) - 1)

    def point_at(self, s) -> np.ndarray:
        """Point at arc length s; extrapolates linearly beyond both ends."""
        s = np.asarray(s, dtype=float)
        i = self._seg_index(s)
        return self.points[i] + self.seg_dir[i] * (s - self.s[i])[..., None]

    def heading_at(self, s) -> np.ndarray:
        return self.seg_heading[self._seg_index(np.asarray(s, dtype=float))]

    def frenet_to_xy(self, s, d) -> tuple[np.ndarray, np.ndarray]:
        s = np.asarray(s, dtype=float)
        d = np.asarray(d, dtype=float)
        i = self._seg_index(s)
        base = self.points[i] + self.seg_dir[i] * (s - self.s[i])[..., None]
        nx, ny = -self.seg_dir[i][..., 1], self.seg_dir[i][..., 0]
        return base[..., 0] + nx * d, base[..., 1] + ny * d

    def project(self, x: float, y: float) -> tuple[float, float]:
        """Return (s, d) of the closest point; d > 0 is left of the direction of travel."""
        key = (float(x), float(y))
        if self._last_projection is not None and self._last_projection[0] == key:
            return self._last_projection[1]
        s, d = self.project_many(np.array([key]))
        out = (float(s[0]), float(d[0]))
        self._last_projection = (key, out)  # control and monitoring project the same pose in turn
        return out

    def project_many(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        rel = pts[:, None, :] - self.points[None, :-1, :]
        t = rel[..., 0] * self.seg_dir[:, 0] + rel[..., 1] * self.seg_dir[:, 1]
        last = len(self.seg_len) - 1
        tc = np.minimum(np.maximum(t, 0.0), self.seg_len)
        # the first and last segments extend to infinity so points beyond the ends project linearly
        tc[:, 0] = np.minimum(t[:, 0], self.seg_len[0])
        tc[:, last] = np.maximum(t[:, last], 0.0) if last else t[:, 0]
        ex = rel[..., 0] - tc * self.seg_dir[:, 0]
        ey = rel[..., 1] - tc * self.seg_dir[:, 1]
        k = np.argmin(ex * ex + ey * ey, axis=1)
        rows = np.arange(len(pts))
        s = self.s[k] + tc[rows, k]
        r = rel[rows, k]
        dirs = self.seg_dir[k]
        d = dirs[:, 0] * r[:, 1] - dirs[:, 1] * r[:, 0]
        return s, d

    def resample(self, step: float) -> np.ndarray:
        n = max(2, int(math.ceil(self.length / step)) + 1)
        return self.point_at(np.linspace(0.0, self.length, n))

    def slice(self, s0: float, s1: float) -> "Polyline":
        """Sub-polyline between stations (extrapolating past the ends)."""
        inner = (self.s > s0) & (self.s < s1)
        pts = [self.point_at(s0)] + list(self.points[inner]) + [self.point_at(s1)]
        return Polyline(np.array(pts))

    def total_turn(self) -> float:
        if len(self.seg_heading) < 2:
            return 0.0
        return float(np.sum(np.abs(wrap_angles(np.diff(self.seg_heading)))))


# --- convex polygons -------------------------------------------------------

def rectangle(cx: float, cy: float, heading: float, length: float, width: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    return np.stack([cx + c * local[:, 0] - s * local[:, 1], cy + s * local[:, 0] + c * local[:, 1]], axis=1)


def footprints(x: np.ndarray, y: np.ndarray, heading: np.ndarray, length: float, width: float,
               rear_overhang: float) -> np.ndarray:
    """Vehicle rectangles (..., 4, 2) for reference points at the rear axle."""
    c, s = np.cos(heading), np.sin(heading)
    front = length - rear_overhang
    lx = np.array([front, -rear_overhang, -rear_overhang, front])
    ly = np.array([width / 2, width / 2, -width / 2, -width / 2])
    px = x[..., None] + c[..., None] * lx - s[..., None] * ly
    py = y[..., None] + s[..., None] * lx + c[..., None] * ly
    return np.stack([px, py], axis=-1)


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise hull (monotone chain)."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=float).tolist())))
    if len(pts) <= 2:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _axes(poly: np.ndarray) -> np.ndarray:
    edges = np.roll(poly, -1, axis=-2) - poly
    return np.stack([-edges[..., 1], edges[..., 0]], axis=-1)


def convex_overlap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Separating-axis overlap test between batches of convex polygons.

    a: (..., N, 2), b: (..., M, 2), broadcast over leading dims. Touching
    boundaries count as overlap.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    a = np.broadcast_to(a, lead + a.shape[-2:])
    b = np.broadcast_to(b, lead + b.shape[-2:])
    axes = np.concatenate([_axes(a), _axes(b)], axis=-2)  # (..., K, 2)
    pa = np.einsum("...kj,...nj->...kn", axes, a)
    pb = np.einsum("...kj,...mj->...km", axes, b)
    separated = (pa.max(-1) < pb.min(-1)) | (pb.max(-1) < pa.min(-1))
    return ~separated.any(-1)


def point_in_convex(poly: np.ndarray, x, y, tol: float = 1e-9) -> np.ndarray:
    """Inside-or-on test for a convex polygon of either orientation."""
    poly = np.asarray(poly, dtype=float)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    nxt = np.roll(poly, -1, axis=0)
    cr = (nxt[:, 0] - poly[:, 0]) * (y[..., None] - poly[:, 1]) - (nxt[:, 1] - poly[:, 1]) * (x[..., None] - poly[:, 0])
    return np.all(cr >= -tol, axis=-1) | np.all(cr <= tol, axis=-1)


def polygon_area(poly: np.ndarray) -> float:
    p = np.asarray(poly, dtype=float)
    return 0.5 * float(np.sum(p[:, 0] * np.roll(p[:, 1], -1) - np.roll(p[:, 0], -1) * p[:, 1]))


def corridor_polygons(line: Polyline, half_width: float, joint_sides: int = 8) -> list[np.ndarray]:
    """Convex pieces covering a band of the given half width around a polyline.

    One quadrilateral per segment plus a regular polygon at each interior
    vertex so bends have no gaps on their outer side.
    """
    polys = []
    for i in range(len(line.seg_len)):
        p0, p1 = line.points[i], line.points[i + 1]
        n = np.array([-line.seg_dir[i, 1], line.seg_dir[i, 0]]) * half_width
        polys.append(np.array([p0 - n, p1 - n, p1 + n, p0 + n]))
    r = half_width / math.cos(math.pi / joint_sides)
    ang = np.arange(joint_sides) * 2 * math.pi / joint_sides
    for p in line.points[1:-1]:
        polys.append(np.stack([p[0] + r * np.cos(ang), p[1] + r * np.sin(ang)], axis=1))
    return polys
