"""Base-centered elevation map and step-height traversability.

The map mirrors what an onboard LiDAR elevation mapper would produce: cell
heights are the highest surface (terrain or occluder top) in the cell, and
cells invisible from the current camera are marked invalid, reproducing
sensor shadowing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose
from .scene import HIT_NONE, Scene, cast_rays
from .viewpoints import STANDING_HEIGHT

GRID_SIZE = 128
RESOLUTION = 0.06
H_STEP = 0.15

_VIS_TOL = 0.01  # meters of shortfall tolerated on the validity ray


@dataclass
class ElevationMap:
    center: np.ndarray             # robot base (x, y)
    resolution: float
    heights: np.ndarray            # (n, n), meaningless where invalid
    valid: np.ndarray              # (n, n) bool

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(2)
        if self.heights.shape != self.valid.shape:
            raise ValueError("heights/valid shape mismatch")

    @property
    def n(self) -> int:
        return self.heights.shape[0]

    def cell_centers(self):
        """World (x, y) of every cell center, shape (n, n) each."""
        n = self.n
        offs = (np.arange(n) - (n - 1) / 2) * self.resolution
        x = self.center[0] + offs[None, :] + np.zeros((n, 1))
        y = self.center[1] + offs[:, None] + np.zeros((1, n))
        return x, y

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        n = self.n
        j = int(np.floor((x - self.center[0]) / self.resolution + n / 2))
        i = int(np.floor((y - self.center[1]) / self.resolution + n / 2))
        return i, j


@dataclass
class TraversableSet:
    """Connected traversable component containing the robot's cell."""

    cells: np.ndarray              # (N, 2) int (row, col)
    world: np.ndarray              # (N, 3) cell-center x, y and surface z
    base_row: int                  # row into cells/world for the robot's cell


def build_elevation_map(scene: Scene, base: Pose, visibility_source: Pose,
                        n: int = GRID_SIZE, resolution: float = RESOLUTION) -> ElevationMap:
    """Elevation map centered on the base; validity from camera visibility.

    Cell height is the maximum of the terrain surface and any occluder top
    covering the cell. A cell is valid iff the ray from the current camera to
    its surface point is unobstructed (the target shadows cells like any
    other geometry).
    """
    center = base.translation[:2]
    emap = ElevationMap(center, resolution, np.zeros((n, n)), np.zeros((n, n), dtype=bool))
    x, y = emap.cell_centers()
    heights = scene.terrain.height_at(x.ravel(), y.ravel()).reshape(n, n)
    in_region = heights > -1e8

    pts = np.stack([x.ravel(), y.ravel()], axis=1)
    for box in scene.occluders:
        # 2D footprint test, inflated by half a cell so partial coverage counts
        loc = np.abs(box.to_local(np.column_stack([pts, np.full(len(pts), box.center[2])])))
        covered = (loc[:, 0] <= box.size[0] / 2 + resolution / 2) & \
                  (loc[:, 1] <= box.size[1] / 2 + resolution / 2)
        covered &= in_region.ravel()
        hcol = heights.ravel()
        hcol[covered] = np.maximum(hcol[covered], box.top_z)
        heights = hcol.reshape(n, n)

    src = visibility_source.translation
    surf = np.stack([x.ravel(), y.ravel(), heights.ravel() + 1e-3], axis=1)
    dirs = surf - src
    seg = np.linalg.norm(dirs, axis=1)
    hits = cast_rays(scene, src, dirs, t_max=np.ones(len(dirs)))
    clear = (hits.kind == HIT_NONE) | (hits.t * seg >= seg - _VIS_TOL)
    valid = clear.reshape(n, n) & in_region
    return ElevationMap(center, resolution, heights, valid)


def traversable_cells(emap: ElevationMap, h_step: float = H_STEP,
                      base_z: float | None = None) -> TraversableSet:
    """Flood-fill from the base cell over valid cells with steps <= h_step.

    4-neighborhood; a neighbor is accepted when its height differs from the
    already-accepted cell by at most h_step. Raises when the base cell is
    invalid or inconsistent with base_z.
    """
    n = emap.n
    bi = bj = n // 2
    if not emap.valid[bi, bj]:
        raise ValueError("base cell is invalid; robot pose inconsistent with map")
    if base_z is not None:
        surface_z = base_z - STANDING_HEIGHT
        if abs(emap.heights[bi, bj] - surface_z) > h_step:
            raise ValueError("base height inconsistent with elevation map")

    acc = np.zeros((n, n), dtype=bool)
    acc[bi, bj] = True
    h = emap.heights
    while True:
        grew = False
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            src = acc
            shifted = np.zeros_like(acc)
            hs = np.full_like(h, np.inf)
            if di == 1:
                shifted[1:, :] = src[:-1, :]
                hs[1:, :] = h[:-1, :]
            elif di == -1:
                shifted[:-1, :] = src[1:, :]
                hs[:-1, :] = h[1:, :]
            elif dj == 1:
                shifted[:, 1:] = src[:, :-1]
                hs[:, 1:] = h[:, :-1]
            else:
                shifted[:, :-1] = src[:, 1:]
                hs[:, :-1] = h[:, 1:]
            new = emap.valid & ~acc & shifted & (np.abs(h - hs) <= h_step)
            if new.any():
                acc |= new
                grew = True
        if not grew:
            break

    ii, jj = np.nonzero(acc)
    cells = np.stack([ii, jj], axis=1)
    x, y = emap.cell_centers()
    world = np.stack([x[ii, jj], y[ii, jj], h[ii, jj]], axis=1)
    base_row = int(np.flatnonzero((ii == bi) & (jj == bj))[0])
    return TraversableSet(cells, world, base_row)
