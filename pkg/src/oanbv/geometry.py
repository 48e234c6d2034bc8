"""Rigid transforms, pinhole projection, depth splatting, and point-cloud basics.

Conventions used throughout the package:
  * world frame: +z up
  * camera frame: +x right, +y down, +z forward (optical axis)
  * a Pose maps local-frame coordinates into its parent frame
    (a camera Pose is camera-to-world)
  * pixel (u, v) is continuous; pixel p covers [p, p+1), so a projection is
    in frame iff 0 <= u < width and 0 <= v < height
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

ORTHONORMAL_TOL = 1e-9

TARGET_LABEL = 1
BACKGROUND_LABEL = 0


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (Frobenius) via SVD, det forced to +1."""
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


@dataclass(frozen=True)
class Pose:
    """Rigid transform: p_parent = rotation @ p_local + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > 1e-7 or abs(np.linalg.det(R) - 1.0) > 1e-7:
            raise ValueError("rotation is not orthonormal with det +1")
        if err > ORTHONORMAL_TOL:
            R = orthonormalize(R)
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (3,) or (N,3) points from the local frame to the parent frame."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M


def compose(a: Pose, b: Pose) -> Pose:
    """Pose applying b then a: (a*b).apply(p) == a.apply(b.apply(p))."""
    R = a.rotation @ b.rotation
    drift = np.abs(R.T @ R - np.eye(3)).max()
    if drift > ORTHONORMAL_TOL:
        R = orthonormalize(R)
    return Pose(R, a.rotation @ b.translation + a.translation)


def invert(p: Pose) -> Pose:
    return p.inverse()


def rot_x(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def rot_y(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


def rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    def scaled(self, s: float) -> "CameraIntrinsics":
        """Intrinsics of the same camera at s times the resolution."""
        w, h = round(self.width * s), round(self.height * s)
        return CameraIntrinsics(self.fx * s, self.fy * s, self.cx * s, self.cy * s, w, h)


DEFAULT_K = CameraIntrinsics(fx=525.0, fy=525.0, cx=320.0, cy=240.0, width=640, height=480)


@dataclass
class PointCloud:
    """3D points with optional per-point semantic label and unit normals.

    `labels` uses TARGET_LABEL / BACKGROUND_LABEL. `normal_valid` flags
    normals from degenerate neighborhoods; invalid rows are zeroed and must
    be excluded from registration.
    """

    points: np.ndarray
    labels: np.ndarray | None = None
    normals: np.ndarray | None = None
    normal_valid: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
            if len(self.labels) != n:
                raise ValueError("labels length mismatch")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != n:
                raise ValueError("normals length mismatch")
            if self.normal_valid is None:
                self.normal_valid = np.ones(n, dtype=bool)
            else:
                self.normal_valid = np.asarray(self.normal_valid, dtype=bool).reshape(-1)
            norms = np.linalg.norm(self.normals[self.normal_valid], axis=1)
            if norms.size and np.abs(norms - 1.0).max() > 1e-6:
                raise ValueError("valid normals must have unit norm")

    def __len__(self) -> int:
        return len(self.points)

    def select(self, mask: np.ndarray) -> "PointCloud":
        return PointCloud(
            self.points[mask],
            None if self.labels is None else self.labels[mask],
            None if self.normals is None else self.normals[mask],
            None if self.normal_valid is None else self.normal_valid[mask],
        )

    def transformed(self, pose: Pose) -> "PointCloud":
        normals = None if self.normals is None else self.normals @ pose.rotation.T
        return PointCloud(pose.apply(self.points), self.labels, normals, self.normal_valid)


@dataclass
class DepthImage:
    """Per-pixel nearest depth; empty pixels hold +inf."""

    width: int
    height: int
    depth: np.ndarray

    @property
    def empty_mask(self) -> np.ndarray:
        return ~np.isfinite(self.depth)


def project(K: CameraIntrinsics, p_cam) -> tuple[float, float, float] | None:
    """Project one camera-frame point; None when at or behind the camera."""
    x, y, z = np.asarray(p_cam, dtype=np.float64)
    if z <= 0:
        return None
    return (K.fx * x / z + K.cx, K.fy * y / z + K.cy, z)


def project_points(K: CameraIntrinsics, pts_cam: np.ndarray):
    """Vectorized projection.

    Returns (u, v, z, in_front, in_frame); u/v are meaningful only where
    in_front. in_frame additionally requires 0 <= u < W and 0 <= v < H.
    """
    pts = np.asarray(pts_cam, dtype=np.float64).reshape(-1, 3)
    z = pts[:, 2]
    in_front = z > 0
    zs = np.where(in_front, z, 1.0)
    u = K.fx * pts[:, 0] / zs + K.cx
    v = K.fy * pts[:, 1] / zs + K.cy
    in_frame = in_front & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    return u, v, z, in_front, in_frame


def unproject(K: CameraIntrinsics, u: float, v: float, depth: float) -> np.ndarray:
    return np.array([(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, depth])


def splat_min(depth_flat: np.ndarray, width: int, height: int,
              u: np.ndarray, v: np.ndarray, z: np.ndarray, radius: int) -> None:
    """Scatter-min depths into a flat (height*width) buffer, Chebyshev splat."""
    pu = np.floor(u).astype(np.int64)
    pv = np.floor(v).astype(np.int64)
    for du in range(-radius, radius + 1):
        for dv in range(-radius, radius + 1):
            cu = pu + du
            cv = pv + dv
            ok = (cu >= 0) & (cu < width) & (cv >= 0) & (cv < height)
            if not ok.any():
                continue
            np.minimum.at(depth_flat, cv[ok] * width + cu[ok], z[ok])


def render_depth(cloud: PointCloud, cam: Pose, K: CameraIntrinsics,
                 splat_radius: int = 1) -> DepthImage:
    """Depth-buffer render of a point set: min depth wins per pixel.

    Every point with positive camera-frame depth writes its depth to all
    pixels within `splat_radius` (Chebyshev) of its projected pixel.
    """
    if splat_radius < 0 or int(splat_radius) != splat_radius:
        raise ValueError("splat_radius must be a non-negative integer")
    buf = np.full(K.height * K.width, np.inf)
    if len(cloud):
        pts_cam = cam.inverse().apply(cloud.points)
        u, v, z, in_front, _ = project_points(K, pts_cam)
        if in_front.any():
            splat_min(buf, K.width, K.height, u[in_front], v[in_front],
                      z[in_front], int(splat_radius))
    return DepthImage(K.width, K.height, buf.reshape(K.height, K.width))


def nearest_neighbor(query, cloud: PointCloud) -> tuple[int, float]:
    """Exact nearest point by Euclidean distance; ties go to the lower index."""
    if len(cloud) == 0:
        raise ValueError("nearest_neighbor on empty cloud")
    d = np.linalg.norm(cloud.points - np.asarray(query, dtype=np.float64), axis=1)
    i = int(np.argmin(d))
    return i, float(d[i])


class PointIndex:
    """KD-tree nearest-neighbor index matching `nearest_neighbor` exactly."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("cannot index an empty point set")
        self.tree = cKDTree(self.points)

    def query_one(self, q) -> tuple[int, float]:
        q = np.asarray(q, dtype=np.float64)
        if len(self.points) == 1:
            return 0, float(np.linalg.norm(self.points[0] - q))
        d, i = self.tree.query(q, k=2)
        if d[0] < d[1]:
            return int(i[0]), float(d[0])
        # exact tie: rescan all candidates at the minimum distance
        cand = self.tree.query_ball_point(q, r=float(d[0]) * (1 + 1e-12))
        dist = np.linalg.norm(self.points[cand] - q, axis=1)
        best = dist.min()
        idx = min(int(c) for c, dd in zip(cand, dist) if dd == best)
        return idx, float(best)

    def query(self, pts: np.ndarray):
        """Bulk nearest-neighbor query; returns (distances, indices)."""
        d, i = self.tree.query(np.asarray(pts, dtype=np.float64))
        return d, i


def estimate_normals(cloud: PointCloud, k: int = 16,
                     sensor_origin=(0.0, 0.0, 0.0)) -> PointCloud:
    """Per-point normals from k-NN covariance, oriented toward the sensor.

    The normal is the eigenvector of the smallest covariance eigenvalue.
    Neighborhoods with rank < 2 covariance are flagged invalid (zero normal,
    normal_valid False) so ICP can exclude them.
    """
    n = len(cloud)
    if k < 3:
        raise ValueError("k must be >= 3")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    tree = cKDTree(cloud.points)
    _, idx = tree.query(cloud.points, k=k)
    nbrs = cloud.points[idx]                       # (n, k, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    w, v = np.linalg.eigh(cov)                     # ascending eigenvalues
    normals = v[:, :, 0]
    valid = w[:, 1] > 1e-8 * np.maximum(w[:, 2], 1e-300)
    valid &= w[:, 2] > 0
    toward = np.asarray(sensor_origin, dtype=np.float64) - cloud.points
    flip = np.einsum("ni,ni->n", normals, toward) < 0
    normals = np.where(flip[:, None], -normals, normals)
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.where(norms > 0, normals / np.maximum(norms, 1e-300), normals)
    normals[~valid] = 0.0
    return PointCloud(cloud.points, cloud.labels, normals, valid)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose at `eye` with the optical axis through `target` (z-up roll)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    nf = np.linalg.norm(fwd)
    if nf < 1e-12:
        raise ValueError("look_at eye and target coincide")
    fwd = fwd / nf
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        # optical axis parallel to up: pick an arbitrary stable roll
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    return Pose(orthonormalize(R), eye)


def yaw_pose(position, yaw: float) -> Pose:
    """Body pose at `position` rotated by `yaw` about world z (+x is forward)."""
    return Pose(rot_z(yaw), np.asarray(position, dtype=np.float64))
