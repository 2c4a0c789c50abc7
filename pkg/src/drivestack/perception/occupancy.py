"""Scrolling log-odds occupancy grid in the local stationary frame."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from ..config import PerceptionParams
from ..core.geometry import Point, Pose2D
from ..core.provenance import VEH_ENV, ProvenanceMask
from .ego_motion import EgoMotion


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Axis-aligned window of ``cells`` x ``cells`` centred on the ego.

    ``origin`` is the integer cell index of the lower-left corner, so the
    window scrolls by whole cells and never resamples.
    """

    origin: tuple[int, int]
    resolution: float
    logodds: np.ndarray
    ego_pose: Pose2D = Pose2D(0.0, 0.0, 0.0)

    @property
    def cells(self) -> int:
        return self.logodds.shape[0]

    def cell_of(self, pts: np.ndarray) -> np.ndarray:
        """Window-relative (row=ix, col=iy) indices for local-frame points."""
        idx = np.floor(np.asarray(pts, dtype=float) / self.resolution).astype(np.int64)
        return idx - np.asarray(self.origin)

    def cell_center(self, ij: np.ndarray) -> np.ndarray:
        return (np.asarray(ij) + np.asarray(self.origin) + 0.5) * self.resolution

    def value_at(self, x: float, y: float) -> float:
        i, j = self.cell_of(np.array([x, y]))
        if 0 <= i < self.cells and 0 <= j < self.cells:
            return float(self.logodds[i, j])
        return 0.0

    def probability(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logodds))


@dataclass(frozen=True)
class GridFeature:
    """Stationary obstacle polygon (counter-clockwise box) extracted from the grid."""

    polygon: tuple[Point, ...]
    cells: int
    provenance: ProvenanceMask = VEH_ENV


def empty_grid(ego_pose: Pose2D = Pose2D(0.0, 0.0, 0.0), params: Optional[PerceptionParams] = None) -> OccupancyGrid:
    p = params or PerceptionParams()
    n = p.grid_cells
    return OccupancyGrid(_origin_for(ego_pose, p.grid_resolution, n), p.grid_resolution, np.zeros((n, n)), ego_pose)


def _origin_for(pose: Pose2D, res: float, n: int) -> tuple[int, int]:
    return (int(math.floor(pose.x / res)) - n // 2, int(math.floor(pose.y / res)) - n // 2)


def scroll(grid: OccupancyGrid, pose: Pose2D) -> OccupancyGrid:
    new_origin = _origin_for(pose, grid.resolution, grid.cells)
    di, dj = new_origin[0] - grid.origin[0], new_origin[1] - grid.origin[1]
    n = grid.cells
    out = np.zeros_like(grid.logodds)
    if abs(di) < n and abs(dj) < n:
        src = grid.logodds[max(di, 0):n + min(di, 0), max(dj, 0):n + min(dj, 0)]
        out[max(-di, 0):n - max(di, 0), max(-dj, 0):n - max(dj, 0)] = src
    return OccupancyGrid(new_origin, grid.resolution, out, pose)


def _ray_cells(grid: OccupancyGrid, origin: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Cells crossed by each ray, sampled at a quarter cell; repeats are kept."""
    if len(ends) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    d = ends - origin
    length = np.hypot(d[:, 0], d[:, 1])
    step = grid.resolution / 4.0
    n = int(math.ceil(length.max() / step)) + 1
    t = np.linspace(0.0, 1.0, n)
    pts = origin + d[:, None, :] * t[None, :, None]
    return grid.cell_of(pts.reshape(-1, 2))


def update_occupancy_grid(grid: OccupancyGrid, returns: Sequence[Point], ego_motion: Optional[EgoMotion],
                          params: Optional[PerceptionParams] = None,
                          ego_pose: Optional[Pose2D] = None) -> OccupancyGrid:
    """Integrate one frame of ego-frame static returns.

    The ego pose advances by ``ego_motion`` (or is given directly), the window
    scrolls, then every hit cell gains ``l_occ`` and every other cell crossed
    by a sensor ray gains ``l_free``, once per frame, clamped.
    """
    p = params or PerceptionParams()
    if ego_pose is None:
        ego_pose = grid.ego_pose.compose(ego_motion.as_pose()) if ego_motion is not None else grid.ego_pose
    g = scroll(grid, ego_pose)
    L = g.logodds.copy()
    n = g.cells
    pts = np.asarray(returns, dtype=float).reshape(-1, 2)
    if len(pts):
        local = ego_pose.to_parent_array(pts)

        def mask_of(ij):
            ij = ij[(ij[:, 0] >= 0) & (ij[:, 0] < n) & (ij[:, 1] >= 0) & (ij[:, 1] < n)]
            m = np.zeros((n, n), dtype=bool)
            m[ij[:, 0], ij[:, 1]] = True
            return m

        hit = mask_of(g.cell_of(local))
        free = mask_of(_ray_cells(g, np.array(ego_pose.xy), local)) & ~hit
        L[hit] += p.l_occ
        L[free] += p.l_free
        np.clip(L, p.l_min, p.l_max, out=L)
    return OccupancyGrid(g.origin, g.resolution, L, ego_pose)


def extract_grid_features(grid: OccupancyGrid, params: Optional[PerceptionParams] = None) -> list[GridFeature]:
    """Connected clusters of cells with p > occupied_p, as bounding boxes, sorted by position."""
    p = params or PerceptionParams()
    thresh = math.log(p.occupied_p / (1.0 - p.occupied_p))
    labels, count = ndimage.label(grid.logodds > thresh, structure=np.ones((3, 3)))
    out = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        i0, i1 = sl[0].start, sl[0].stop
        j0, j1 = sl[1].start, sl[1].stop
        x0, y0 = (np.array([i0, j0]) + grid.origin) * grid.resolution
        x1, y1 = (np.array([i1, j1]) + grid.origin) * grid.resolution
        box = ((float(x0), float(y0)), (float(x1), float(y0)), (float(x1), float(y1)), (float(x0), float(y1)))
        out.append(GridFeature(box, int((labels[sl] == k).sum())))
    out.sort(key=lambda f: (f.polygon[0][0], f.polygon[0][1]))
    return out
