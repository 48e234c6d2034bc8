"""Synthetic scenes (terrain, box occluders, posed humanoid), a simulated depth
camera, and the ground-truth perception oracles.

Ray casting is fully vectorized: boxes use slab tests, the terrain heightfield
uses banded marching plus bisection, and target triangles use Moller-Trumbore
behind per-part AABB culling. Ray parameters t are in units of the (possibly
unnormalized) direction vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import (BACKGROUND_LABEL, DEFAULT_K, TARGET_LABEL, CameraIntrinsics,
                       DepthImage, Pose, PointCloud, rot_z, yaw_pose)
from .humanoid import (KEYPOINT_LOCAL_PARTS, KEYPOINT_NAMES, JointAngles,
                       LabeledMesh, make_humanoid)
from .viewpoints import aim_pitch, camera_from_base, default_mount

HIT_NONE, HIT_TERRAIN, HIT_BOX, HIT_TARGET = 0, 1, 2, 3

DEFAULT_MAX_RANGE = 15.0
KEYPOINT_MARGIN = 0.03

_T_EPS = 1e-9


@dataclass(frozen=True)
class Box:
    """Yaw-rotated box occluder; size is the full extent per axis."""

    center: np.ndarray
    size: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "size", np.asarray(self.size, dtype=np.float64).reshape(3))

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    @property
    def top_z(self) -> float:
        return float(self.center[2] + self.size[2] / 2)

    def to_local(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.center) @ rot_z(self.yaw)

    def contains(self, pts: np.ndarray, margin: float = 0.0) -> np.ndarray:
        loc = np.abs(self.to_local(np.atleast_2d(pts)))
        return (loc <= self.size / 2 + margin).all(axis=1)

    def footprint_distance_xy(self, xy) -> float:
        """2D distance from a point to the box footprint (0 inside)."""
        p = np.zeros(3)
        p[:2] = np.asarray(xy, dtype=np.float64)
        p[2] = self.center[2]
        loc = np.abs(self.to_local(p)[:2])
        d = np.maximum(loc - self.size[:2] / 2, 0.0)
        return float(np.hypot(d[0], d[1]))

    def ray_hits(self, origins: np.ndarray, dirs: np.ndarray):
        """Slab test; returns (t_near, t_far); miss encoded as t_near > t_far."""
        R = rot_z(self.yaw)
        o = (origins - self.center) @ R
        d = dirs @ R
        half = self.size / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-half - o) * inv
            t2 = (half - o) * inv
        lo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
        hi = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
        # parallel rays outside the slab never hit
        par_out = (d == 0) & (np.abs(o) > half)
        lo = np.where(par_out, np.inf, lo)
        t_near = lo.max(axis=1)
        t_far = hi.min(axis=1)
        return t_near, t_far


@dataclass(frozen=True)
class Terrain:
    """Regular-grid heightfield z = h(x, y); no terrain outside the region."""

    origin: np.ndarray            # (2,) min corner
    resolution: float
    heights: np.ndarray           # (ny, nx)

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(2))
        object.__setattr__(self, "heights", np.asarray(self.heights, dtype=np.float64))

    @property
    def extent(self) -> np.ndarray:
        ny, nx = self.heights.shape
        return self.origin + np.array([(nx - 1), (ny - 1)]) * self.resolution

    def in_region(self, x, y) -> np.ndarray:
        hi = self.extent
        return (x >= self.origin[0]) & (x <= hi[0]) & (y >= self.origin[1]) & (y <= hi[1])

    def height_at(self, x, y) -> np.ndarray:
        """Bilinear height; -1e9 outside the region (treated as a hole)."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        ny, nx = self.heights.shape
        gx = np.clip((x - self.origin[0]) / self.resolution, 0, nx - 1 - 1e-12)
        gy = np.clip((y - self.origin[1]) / self.resolution, 0, ny - 1 - 1e-12)
        ix = gx.astype(np.int64)
        iy = gy.astype(np.int64)
        fx, fy = gx - ix, gy - iy
        h = (self.heights[iy, ix] * (1 - fx) * (1 - fy)
             + self.heights[iy, ix + 1] * fx * (1 - fy)
             + self.heights[iy + 1, ix] * (1 - fx) * fy
             + self.heights[iy + 1, ix + 1] * fx * fy)
        return np.where(self.in_region(x, y), h, -1e9)

    @property
    def is_flat(self) -> bool:
        return bool(np.ptp(self.heights) == 0)


@dataclass(frozen=True)
class TargetSpec:
    """Parameters regenerating the posed target; kept for scene serialization."""

    scale: float
    joint_angles: JointAngles
    yaw: float
    position: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))

    def build(self) -> LabeledMesh:
        mesh = make_humanoid(self.joint_angles, self.scale)
        return mesh.transformed(Pose(rot_z(self.yaw), self.position))


class _RayCache:
    """Precomputed triangle soup + per-part AABBs for the target mesh."""

    def __init__(self, mesh: LabeledMesh):
        v = mesh.vertices
        f = mesh.faces
        self.v0 = v[f[:, 0]]
        self.e1 = v[f[:, 1]] - self.v0
        self.e2 = v[f[:, 2]] - self.v0
        self.tri_part = mesh.part_of[f[:, 0]]
        self.parts = np.unique(self.tri_part)
        self.part_tris = {int(p): np.flatnonzero(self.tri_part == p) for p in self.parts}
        self.part_lo = {}
        self.part_hi = {}
        for p in self.parts:
            idx = mesh.vertex_indices_of([int(p)])
            self.part_lo[int(p)] = v[idx].min(axis=0) - 1e-9
            self.part_hi[int(p)] = v[idx].max(axis=0) + 1e-9


@dataclass
class Scene:
    """Immutable synthetic world; `target` is the ground-truth posed mesh."""

    terrain: Terrain
    occluders: list[Box]
    target: LabeledMesh
    spawn: Pose
    family: str
    seed: int
    target_spec: TargetSpec | None = None
    _cache: _RayCache | None = field(default=None, repr=False, compare=False)

    @property
    def raycache(self) -> _RayCache:
        if self._cache is None:
            self._cache = _RayCache(self.target)
        return self._cache

    def spawn_camera(self, mount: Pose | None = None) -> Pose:
        """Initial camera: spawn base, pitch aimed at the true target centroid."""
        mount = mount or default_mount()
        cam0 = camera_from_base(self.spawn, 0.0, mount)
        alpha = aim_pitch(cam0.translation, self.target.centroid())
        return camera_from_base(self.spawn, alpha, mount)

    def to_dict(self) -> dict:
        if self.target_spec is None:
            raise ValueError("scene has no target_spec; cannot serialize")
        ts = self.target_spec
        return {
            "family": self.family,
            "seed": self.seed,
            "terrain": {
                "origin": self.terrain.origin.tolist(),
                "resolution": self.terrain.resolution,
                "heights": self.terrain.heights.tolist(),
            },
            "occluders": [
                {"center": b.center.tolist(), "size": b.size.tolist(), "yaw": b.yaw}
                for b in self.occluders
            ],
            "target": {
                "scale": ts.scale,
                "joint_angles": ts.joint_angles.as_dict(),
                "yaw": ts.yaw,
                "position": ts.position.tolist(),
            },
            "spawn": {
                "position": self.spawn.translation.tolist(),
                "yaw": float(np.arctan2(self.spawn.rotation[1, 0], self.spawn.rotation[0, 0])),
            },
        }

    @staticmethod
    def from_dict(d: dict) -> "Scene":
        terrain = Terrain(np.array(d["terrain"]["origin"]), d["terrain"]["resolution"],
                          np.array(d["terrain"]["heights"]))
        occluders = [Box(np.array(b["center"]), np.array(b["size"]), b["yaw"])
                     for b in d["occluders"]]
        ts = TargetSpec(d["target"]["scale"], JointAngles(**d["target"]["joint_angles"]),
                        d["target"]["yaw"], np.array(d["target"]["position"]))
        spawn = yaw_pose(np.array(d["spawn"]["position"]), d["spawn"]["yaw"])
        return Scene(terrain, occluders, ts.build(), spawn, d["family"], d["seed"], ts)


@dataclass
class RayHits:
    t: np.ndarray            # hit parameter, +inf on miss
    kind: np.ndarray         # HIT_* per ray
    part: np.ndarray         # PartLabel value for target hits, -1 otherwise


def _terrain_raycast(terrain: Terrain, origins: np.ndarray, dirs: np.ndarray,
                     t_max: np.ndarray) -> np.ndarray:
    """First ray/heightfield crossing per ray (+inf on miss)."""
    n = len(dirs)
    t_hit = np.full(n, np.inf)
    oz = origins[:, 2]
    dz = dirs[:, 2]

    if terrain.is_flat:
        h0 = float(terrain.heights.flat[0])
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (h0 - oz) / dz
        ok = (dz != 0) & (t > _T_EPS) & (t < t_max)
        if ok.any():
            x = origins[ok, 0] + t[ok] * dirs[ok, 0]
            y = origins[ok, 1] + t[ok] * dirs[ok, 1]
            ok2 = terrain.in_region(x, y)
            idx = np.flatnonzero(ok)[ok2]
            t_hit[idx] = t[ok][ok2]
        below = (oz <= h0) & terrain.in_region(origins[:, 0], origins[:, 1])
        t_hit[below] = np.minimum(t_hit[below], _T_EPS)
        return t_hit

    z_lo = float(terrain.heights.min())
    z_hi = float(terrain.heights.max())
    hi = terrain.extent
    lo_t = np.full(n, _T_EPS)
    hi_t = t_max.astype(np.float64).copy()
    bounds = [(terrain.origin[0], hi[0], 0), (terrain.origin[1], hi[1], 1),
              (z_lo - 1e-6, z_hi + 1e-6, 2)]
    for bmin, bmax, ax in bounds:
        o, d = origins[:, ax], dirs[:, ax]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (bmin - o) / d
            t2 = (bmax - o) / d
        tl = np.where(d != 0, np.minimum(t1, t2), np.where((o >= bmin) & (o <= bmax), -np.inf, np.inf))
        th = np.where(d != 0, np.maximum(t1, t2), np.where((o >= bmin) & (o <= bmax), np.inf, -np.inf))
        lo_t = np.maximum(lo_t, tl)
        hi_t = np.minimum(hi_t, th)

    active = np.flatnonzero(lo_t < hi_t)
    if active.size == 0:
        return t_hit
    step_world = 0.12
    seg_len = (hi_t[active] - lo_t[active]) * np.linalg.norm(dirs[active], axis=1)
    n_steps = np.ceil(seg_len / step_world).astype(np.int64).clip(1, 320)

    def f_of(t, rows):
        p = origins[rows] + t[:, None] * dirs[rows]
        return p[:, 2] - terrain.height_at(p[:, 0], p[:, 1])

    for cap in (24, 96, 320):
        sel = active[(n_steps <= cap) & (n_steps > 0)]
        n_steps[(n_steps <= cap)] = 0
        if sel.size == 0:
            continue
        ts = lo_t[sel, None] + (hi_t[sel] - lo_t[sel])[:, None] * (np.arange(cap + 1) / cap)
        pts = origins[sel, None, :] + ts[:, :, None] * dirs[sel, None, :]
        fvals = pts[:, :, 2] - terrain.height_at(pts[:, :, 0].ravel(), pts[:, :, 1].ravel()).reshape(sel.size, cap + 1)
        below = fvals < 0
        has = below.any(axis=1)
        if not has.any():
            continue
        rows = np.flatnonzero(has)
        first = below[rows].argmax(axis=1)
        ridx = sel[rows]
        t_b = ts[rows, first]
        t_a = np.where(first > 0, ts[rows, np.maximum(first - 1, 0)], lo_t[ridx])
        # origin-side sample already below terrain: hit at the window start
        at_start = first == 0
        for _ in range(45):
            mid = 0.5 * (t_a + t_b)
            below_mid = f_of(mid, ridx) < 0
            t_b = np.where(below_mid, mid, t_b)
            t_a = np.where(below_mid, t_a, mid)
        res = np.where(at_start, lo_t[ridx], t_b)
        t_hit[ridx] = np.minimum(t_hit[ridx], res)
    return t_hit


def _slab_window(lo, hi, origins, dirs):
    """AABB entry/exit parameters for a batch of rays."""
    n = len(dirs)
    t_lo = np.full(n, -np.inf)
    t_hi = np.full(n, np.inf)
    for ax in range(3):
        o, d = origins[:, ax], dirs[:, ax]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[ax] - o) / d
            t2 = (hi[ax] - o) / d
        inside = (o >= lo[ax]) & (o <= hi[ax])
        tl = np.where(d != 0, np.minimum(t1, t2), np.where(inside, -np.inf, np.inf))
        th = np.where(d != 0, np.maximum(t1, t2), np.where(inside, np.inf, -np.inf))
        t_lo = np.maximum(t_lo, tl)
        t_hi = np.minimum(t_hi, th)
    return t_lo, t_hi


def _target_raycast(cache: _RayCache, origins, dirs, t_max, skip_parts=()):
    n = len(dirs)
    t_hit = np.full(n, np.inf)
    part_hit = np.full(n, -1, dtype=np.int64)
    skip = {int(p) for p in skip_parts}
    for p in cache.parts:
        if int(p) in skip:
            continue
        t_lo, t_hi = _slab_window(cache.part_lo[int(p)], cache.part_hi[int(p)], origins, dirs)
        cand = np.flatnonzero((t_lo <= t_hi) & (t_hi > _T_EPS) & (t_lo < np.minimum(t_max, t_hit)))
        if cand.size == 0:
            continue
        tris = cache.part_tris[int(p)]
        v0, e1, e2 = cache.v0[tris], cache.e1[tris], cache.e2[tris]
        for start in range(0, cand.size, 2048):
            rows = cand[start:start + 2048]
            o = origins[rows][:, None, :]
            d = dirs[rows][:, None, :]
            h = np.cross(d, e2[None, :, :])
            a = np.einsum("rtk,tk->rt", h, e1)
            with np.errstate(divide="ignore", invalid="ignore"):
                fa = 1.0 / a
            s = o - v0[None, :, :]
            u = fa * np.einsum("rtk,rtk->rt", s, h)
            q = np.cross(s, e1[None, :, :])
            v = fa * np.einsum("rtk,rtk->rt", q, np.broadcast_to(d, q.shape))
            t = fa * np.einsum("rtk,tk->rt", q, e2)
            eps = 1e-9
            with np.errstate(invalid="ignore"):
                valid = (np.abs(a) > 1e-14) & (u >= -eps) & (v >= -eps) & (u + v <= 1 + eps)
                valid &= (t > _T_EPS) & (t < np.minimum(t_max[rows], t_hit[rows])[:, None])
            t_masked = np.where(valid, t, np.inf)
            best = t_masked.min(axis=1)
            better = best < t_hit[rows]
            t_hit[rows[better]] = best[better]
            part_hit[rows[better]] = int(p)
    return t_hit, part_hit


def cast_rays(scene: Scene, origins, dirs, t_max=None, skip_parts=(),
              include_target: bool = True) -> RayHits:
    """First hit of each ray against terrain, boxes, and target triangles.

    origins may be a single (3,) point or (R, 3); t is in units of dirs.
    Rays whose origin lies inside a box see nothing (solid matter).
    """
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(dirs)
    origins = np.asarray(origins, dtype=np.float64)
    if origins.ndim == 1:
        origins = np.broadcast_to(origins, (n, 3))
    if t_max is None:
        t_max = np.full(n, np.inf)
    else:
        t_max = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,))

    t_best = np.full(n, np.inf)
    kind = np.full(n, HIT_NONE, dtype=np.int8)
    part = np.full(n, -1, dtype=np.int64)

    t_ter = _terrain_raycast(scene.terrain, origins, dirs, t_max)
    upd = t_ter < np.minimum(t_best, t_max)
    t_best[upd] = t_ter[upd]
    kind[upd] = HIT_TERRAIN

    buried = np.zeros(n, dtype=bool)
    for b in scene.occluders:
        t_near, t_far = b.ray_hits(origins, dirs)
        inside = (t_near < 0) & (t_far > 0)
        buried |= inside
        hit = (t_near <= t_far) & (t_near > _T_EPS) & (t_near < np.minimum(t_best, t_max))
        t_best[hit] = t_near[hit]
        kind[hit] = HIT_BOX

    if include_target and scene.target is not None:
        t_tg, p_tg = _target_raycast(scene.raycache, origins, dirs, t_max, skip_parts)
        upd = t_tg < np.minimum(t_best, t_max)
        t_best[upd] = t_tg[upd]
        kind[upd] = HIT_TARGET
        part[upd] = p_tg[upd]

    t_best[buried] = np.inf
    kind[buried] = HIT_NONE
    part[buried] = -1
    return RayHits(t_best, kind, part)


@dataclass
class Observation:
    """One simulated depth-camera frame with ground-truth annotations."""

    cloud: PointCloud             # camera frame, labeled
    gt_mask: np.ndarray           # (H, W) bool, target pixels
    depth: DepthImage             # (H, W), +inf where empty
    cam: Pose
    K: CameraIntrinsics
    stride: int
    ray_kind: np.ndarray          # per-ray HIT_* at the sampled grid
    ray_t: np.ndarray             # per-ray depth (z units), +inf on miss

    @property
    def n_rays(self) -> int:
        return self.ray_kind.size


def render_observation(scene: Scene, cam: Pose, K: CameraIntrinsics,
                       stride: int = 2, max_range: float = DEFAULT_MAX_RANGE) -> Observation:
    """Cast one ray per stride-th pixel; first hits become labeled 3D points."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if K.width % stride or K.height % stride:
        raise ValueError("stride must divide the image size")
    us = np.arange(0, K.width, stride)
    vs = np.arange(0, K.height, stride)
    uu, vv = np.meshgrid(us, vs)
    dx = (uu.ravel() + 0.5 - K.cx) / K.fx
    dy = (vv.ravel() + 0.5 - K.cy) / K.fy
    dirs_cam = np.stack([dx, dy, np.ones_like(dx)], axis=1)
    dirs_w = dirs_cam @ cam.rotation.T
    hits = cast_rays(scene, cam.translation, dirs_w, t_max=np.full(len(dirs_w), max_range))

    hit = hits.kind != HIT_NONE
    pts_cam = dirs_cam[hit] * hits.t[hit, None]
    labels = np.where(hits.kind[hit] == HIT_TARGET, TARGET_LABEL, BACKGROUND_LABEL)
    cloud = PointCloud(pts_cam, labels.astype(np.uint8))

    h_s, w_s = len(vs), len(us)
    mask_small = (hits.kind == HIT_TARGET).reshape(h_s, w_s)
    gt_mask = np.repeat(np.repeat(mask_small, stride, axis=0), stride, axis=1)
    depth_small = np.where(hit, hits.t, np.inf).reshape(h_s, w_s)
    depth = np.repeat(np.repeat(depth_small, stride, axis=0), stride, axis=1)
    return Observation(cloud, gt_mask, DepthImage(K.width, K.height, depth), cam, K,
                       stride, hits.kind.copy(), np.where(hit, hits.t, np.inf))


# ---------------------------------------------------------------------------
# scene generation

REGION_HALF = 8.0
TERRAIN_RES = 0.25
BASE_HEIGHT = 0.3

_FAMILY_CODE = {"indoor": 11, "outdoor": 23}
# low-res probe camera (same field of view as DEFAULT_K) for cheap area checks
_PROBE_K = CameraIntrinsics(fx=65.625, fy=65.625, cx=40.0, cy=30.0, width=80, height=60)


class SceneGenerationError(RuntimeError):
    pass


def env_occluded_fraction(scene: Scene, cam_pos: np.ndarray) -> float:
    """Fraction of target vertices whose view ray is blocked by boxes/terrain.

    Rays first hitting the body itself count as self-occluded, not
    environment-occluded.
    """
    verts = scene.target.vertices
    dirs = verts - cam_pos
    seg = np.linalg.norm(dirs, axis=1)
    hits = cast_rays(scene, cam_pos, dirs, t_max=np.ones(len(dirs)))
    tol = 0.003 / np.maximum(seg, 1e-9)
    blocked = (hits.kind == HIT_TERRAIN) | (hits.kind == HIT_BOX)
    blocked &= hits.t < 1.0 - tol
    return float(blocked.mean())


def place_base(scene: Scene, x: float, y: float, yaw: float) -> Pose:
    """Robot base pose standing on the terrain surface at (x, y)."""
    z = float(scene.terrain.height_at(np.array(x), np.array(y))) + BASE_HEIGHT
    return yaw_pose((x, y, z), yaw)


def _terrain_for(family: str, rng: np.random.Generator) -> Terrain:
    n = int(2 * REGION_HALF / TERRAIN_RES) + 1
    xs = np.linspace(-REGION_HALF, REGION_HALF, n)
    gx, gy = np.meshgrid(xs, xs)
    heights = np.zeros((n, n))
    if family == "outdoor":
        for _ in range(int(rng.integers(5, 10))):
            cx, cy = rng.uniform(-7, 7, size=2)
            amp = rng.uniform(0.04, 0.26)
            sig = rng.uniform(0.6, 1.8)
            heights += amp * np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2 * sig**2))
    return Terrain(np.array([-REGION_HALF, -REGION_HALF]), TERRAIN_RES, heights)


def _box_on_terrain(terrain: Terrain, rng: np.random.Generator, xy, sx, sy, h, yaw) -> Box:
    z0 = float(terrain.height_at(np.array(xy[0]), np.array(xy[1]))) - 0.02
    return Box(np.array([xy[0], xy[1], z0 + h / 2]), np.array([sx, sy, h + 0.02]), yaw)


def generate_scene(family: str, seed: int, occlusion_band=(0.2, 0.8),
                   max_attempts: int = 100, spawn_detectable: bool = True,
                   spawn_kp_range=(4, 8)) -> Scene:
    """Deterministic scene with the target partially occluded from spawn.

    Outdoor scenes use more and larger occluders and rougher terrain than
    indoor ones. When spawn_detectable is set, the spawn view must also pass
    the detection proxy (partial but usable initial visibility), with the
    visible-keypoint count inside spawn_kp_range. Raises
    SceneGenerationError when no attempt satisfies the constraints.
    """
    if family not in _FAMILY_CODE:
        raise ValueError(f"unknown scenario family {family!r}")
    for attempt in range(max_attempts):
        rng = np.random.default_rng([_FAMILY_CODE[family], seed, attempt])
        terrain = _terrain_for(family, rng)

        scale = rng.uniform(1.55, 1.9)
        angles = JointAngles(
            left_shoulder=rng.uniform(0.6, 1.4), right_shoulder=rng.uniform(0.6, 1.4),
            left_elbow=rng.uniform(0.0, 0.9), right_elbow=rng.uniform(0.0, 0.9),
            left_hip=rng.uniform(-0.35, 0.35), right_hip=rng.uniform(-0.35, 0.35),
            left_knee=rng.uniform(0.0, 0.6), right_knee=rng.uniform(0.0, 0.6),
        )
        t_xy = rng.uniform(-2.5, 2.5, size=2)
        t_yaw = rng.uniform(-np.pi, np.pi)
        t_z = float(terrain.height_at(np.array(t_xy[0]), np.array(t_xy[1])))
        spec = TargetSpec(scale, angles, t_yaw, np.array([t_xy[0], t_xy[1], t_z]))
        target = spec.build()
        t_radius = float(np.linalg.norm(target.vertices[:, :2] - t_xy, axis=1).max())

        bearing = rng.uniform(-np.pi, np.pi)
        dist = rng.uniform(2.5, 4.5)
        s_xy = t_xy + dist * np.array([np.cos(bearing), np.sin(bearing)])
        if np.abs(s_xy).max() > REGION_HALF - 1.0:
            continue
        s_yaw = float(np.arctan2(t_xy[1] - s_xy[1], t_xy[0] - s_xy[0]))

        if family == "indoor":
            n_clutter = int(rng.integers(1, 4))
            size_xy, size_h = (0.4, 1.2), (0.7, 1.5)
        else:
            n_clutter = int(rng.integers(4, 8))
            size_xy, size_h = (0.5, 1.6), (0.8, 2.0)

        los = np.linspace(0.15, 0.85, 8)[:, None] * (s_xy - t_xy) + t_xy
        perp = np.array([-(t_xy - s_xy)[1], (t_xy - s_xy)[0]]) / dist
        boxes = []
        ok = True
        for k in range(1 + n_clutter):
            placed = False
            for _try in range(20):
                sx = rng.uniform(*size_xy)
                sy = rng.uniform(*size_xy)
                h = rng.uniform(*size_h)
                if k == 0:
                    # primary occluder cuts one side of the view cone: its
                    # edge lands inside the target's apparent width
                    frac = rng.uniform(0.3, 0.7)
                    along = t_xy + frac * (s_xy - t_xy)
                    half_diag = 0.5 * float(np.hypot(sx, sy))
                    side = rng.choice([-1.0, 1.0])
                    b_xy = along + side * rng.uniform(0.1, 0.9) * half_diag * perp
                else:
                    r = rng.uniform(1.2, 4.5)
                    th = rng.uniform(-np.pi, np.pi)
                    b_xy = t_xy + r * np.array([np.cos(th), np.sin(th)])
                if np.abs(b_xy).max() > REGION_HALF - 0.5:
                    continue
                box = _box_on_terrain(terrain, rng, b_xy, sx, sy, h, rng.uniform(0, np.pi))
                if box.footprint_distance_xy(t_xy) < t_radius + 0.05:
                    continue
                if box.footprint_distance_xy(s_xy) < 0.35:
                    continue
                if k > 0 and min(box.footprint_distance_xy(p) for p in los) < 0.4:
                    continue  # clutter stays off the spawn sight corridor
                boxes.append(box)
                placed = True
                break
            if not placed:
                ok = False
                break
        if not ok:
            continue

        spawn_z = float(terrain.height_at(np.array(s_xy[0]), np.array(s_xy[1]))) + BASE_HEIGHT
        spawn = yaw_pose((s_xy[0], s_xy[1], spawn_z), s_yaw)
        scene = Scene(terrain, boxes, target, spawn, family, seed, spec)
        cam = scene.spawn_camera()
        frac = env_occluded_fraction(scene, cam.translation)
        if not (occlusion_band[0] <= frac <= occlusion_band[1]):
            continue
        if spawn_detectable:
            n_vis, _ = oracle_keypoint_visibility(scene, cam, DEFAULT_K)
            if not (spawn_kp_range[0] <= n_vis <= spawn_kp_range[1]):
                continue
            probe = render_observation(scene, cam, _PROBE_K, stride=2)
            if float(probe.gt_mask.mean()) < 0.0075:
                continue
        return scene
    raise SceneGenerationError(
        f"no valid scene for family={family} seed={seed} in {max_attempts} attempts")


# ---------------------------------------------------------------------------
# perception oracles (stand-ins for the learned modules)

def oracle_segmentation(obs: Observation, boundary_noise: int = 0, seed: int = 0) -> np.ndarray:
    """Ground-truth mask morphologically perturbed by at most boundary_noise px."""
    if boundary_noise < 0:
        raise ValueError("boundary_noise must be >= 0")
    mask = obs.gt_mask.copy()
    if boundary_noise == 0 or not mask.any():
        return mask
    rng = np.random.default_rng([97, seed])
    amount = int(rng.integers(-boundary_noise, boundary_noise + 1))
    if amount == 0:
        return mask
    struct = np.ones((3, 3), dtype=bool)
    if amount > 0:
        return ndimage.binary_dilation(mask, struct, iterations=amount)
    return ndimage.binary_erosion(mask, struct, iterations=-amount)


def oracle_keypoint_visibility(scene: Scene, cam: Pose, K: CameraIntrinsics) -> tuple[int, int]:
    """Visible keypoint count via ray casting (proxy for a 2D keypoint detector).

    A keypoint is visible iff it projects inside the frame with positive depth
    and the camera->keypoint ray is clear of occluders, terrain, and non-local
    target geometry within a 0.03 m endpoint margin.
    """
    kps = scene.target.keypoints
    cam_inv = cam.inverse()
    pts_cam = cam_inv.apply(kps)
    z = pts_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * pts_cam[:, 0] / z + K.cx
        v = K.fy * pts_cam[:, 1] / z + K.cy
    in_frame = (z > 0) & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)

    n_vis = 0
    origin = cam.translation
    for i, name in enumerate(KEYPOINT_NAMES):
        if not in_frame[i]:
            continue
        d = kps[i] - origin
        seg = np.linalg.norm(d)
        hits = cast_rays(scene, origin, d[None, :], t_max=np.ones(1),
                         skip_parts=KEYPOINT_LOCAL_PARTS[name])
        if hits.kind[0] == HIT_NONE or hits.t[0] * seg >= seg - KEYPOINT_MARGIN:
            n_vis += 1
    return n_vis, len(KEYPOINT_NAMES)


def keypoint_visibility_batch(scene: Scene, cams: list[Pose],
                              K: CameraIntrinsics) -> np.ndarray:
    """Visible keypoint counts for many cameras at once (same rules as the
    single-camera oracle)."""
    kps = scene.target.keypoints
    C = len(cams)
    t_stack = np.stack([c.translation for c in cams])
    R_stack = np.stack([c.rotation for c in cams])
    counts = np.zeros(C, dtype=np.int64)
    for ki, name in enumerate(KEYPOINT_NAMES):
        rel = kps[ki] - t_stack                       # (C, 3) world
        p_cam = np.einsum("cij,cj->ci", R_stack.transpose(0, 2, 1), rel)
        z = p_cam[:, 2]
        front = z > 0
        zs = np.where(front, z, 1.0)
        u = K.fx * p_cam[:, 0] / zs + K.cx
        v = K.fy * p_cam[:, 1] / zs + K.cy
        in_frame = front & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
        seg = np.linalg.norm(rel, axis=1)
        hits = cast_rays(scene, t_stack, rel, t_max=np.ones(C),
                         skip_parts=KEYPOINT_LOCAL_PARTS[name])
        clear = (hits.kind == HIT_NONE) | (hits.t * seg >= seg - KEYPOINT_MARGIN)
        counts += (in_frame & clear).astype(np.int64)
    return counts


def oracle_detection(scene: Scene, obs: Observation, tau_area: float = 0.005,
                     tau_kp: int = 4) -> bool:
    """Detection proxy: enough apparent area and enough visible keypoints."""
    area = float(obs.gt_mask.mean())
    if area < tau_area:
        return False
    n_vis, _ = oracle_keypoint_visibility(scene, obs.cam, obs.K)
    return n_vis >= tau_kp
