"""Target 3D extraction: mask lifting, visible-part oracle, mesh perturbation,
point-to-plane ICP, and the full alignment pipeline with its error metric.

Alignment runs in the camera frame of the observation. The ICP source is the
visible-part submesh when any parts are visible, otherwise the whole mesh;
the resulting transform is always applied to the whole mesh.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (CameraIntrinsics, Pose, PointCloud, compose, estimate_normals,
                       orthonormalize, project_points, PointIndex)
from .humanoid import LabeledMesh, PartLabel
from .scene import HIT_NONE, Observation, Scene, cast_rays, oracle_segmentation

MIN_TARGET_POINTS = 10
MIN_CORRESPONDENCES = 6


class DegenerateRegistrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class IcpConfig:
    max_iter: int = 50
    max_corr: float = 0.3
    tol: float = 1e-6
    normal_k: int = 16


@dataclass
class AlignmentResult:
    T_icp: Pose
    aligned: LabeledMesh
    p_tgt: PointCloud
    p_bg: PointCloud
    visible_parts: frozenset
    residual_history: list[float]
    flags: tuple[str, ...] = ()


def lift_mask(cloud: PointCloud, K: CameraIntrinsics, mask: np.ndarray):
    """Split a camera-frame cloud by the 2D mask.

    A point is target iff it projects inside the image and the mask is set at
    its floored pixel; behind-camera and out-of-frame points are background.
    """
    if mask.shape != (K.height, K.width):
        raise ValueError("mask dimensions must match the intrinsics")
    if len(cloud) == 0:
        return cloud.select(np.zeros(0, dtype=bool)), cloud.select(np.zeros(0, dtype=bool))
    u, v, _, _, in_frame = project_points(K, cloud.points)
    tgt = np.zeros(len(cloud), dtype=bool)
    if in_frame.any():
        pu = np.floor(u[in_frame]).astype(np.int64)
        pv = np.floor(v[in_frame]).astype(np.int64)
        tgt[np.flatnonzero(in_frame)] = mask[pv, pu]
    return cloud.select(tgt), cloud.select(~tgt)


def visible_parts(scene: Scene, cam: Pose, K: CameraIntrinsics,
                  frac_threshold: float = 0.25, label_flip_prob: float = 0.0,
                  seed: int = 0) -> frozenset:
    """Parts with enough vertices in frame and unoccluded (ray test).

    The optional label-flip noise emulates an imperfect part classifier.
    """
    verts = scene.target.vertices
    pts_cam = cam.inverse().apply(verts)
    _, _, _, _, in_frame = project_points(K, pts_cam)

    origin = cam.translation
    dirs = verts - origin
    seg = np.linalg.norm(dirs, axis=1)
    hits = cast_rays(scene, origin, dirs, t_max=np.ones(len(dirs)))
    clear = (hits.kind == HIT_NONE) | (hits.t * seg >= seg - 0.003)
    visible = in_frame & clear

    out = set()
    for part in PartLabel:
        idx = scene.target.vertex_indices_of([part])
        if visible[idx].mean() >= frac_threshold:
            out.add(part)
    if label_flip_prob > 0:
        rng = np.random.default_rng([31, seed])
        for part in PartLabel:
            if rng.random() < label_flip_prob:
                out.symmetric_difference_update({part})
    return frozenset(out)


def extract_part_submesh(mesh: LabeledMesh, parts) -> np.ndarray:
    """Indices of vertices whose part label is in `parts` (may be empty)."""
    return mesh.vertex_indices_of(parts)


def perturb_initial_mesh(gt: LabeledMesh, cam: Pose, seed: int,
                         depth_sigma: float = 0.4, lateral_sigma: float = 0.05,
                         rot_sigma: float = 0.05) -> LabeledMesh:
    """Rigidly displace the mesh, mostly along the camera view ray.

    Emulates an appearance-based reconstructor whose main error is depth
    localization. Deterministic in seed; zero sigmas return the input exactly.
    """
    if min(depth_sigma, lateral_sigma, rot_sigma) < 0:
        raise ValueError("sigmas must be >= 0")
    rng = np.random.default_rng([53, seed])
    centroid = gt.centroid()
    ray = centroid - cam.translation
    ray = ray / max(np.linalg.norm(ray), 1e-12)
    l1 = np.cross(ray, [0.0, 0.0, 1.0])
    if np.linalg.norm(l1) < 1e-9:
        l1 = np.cross(ray, [1.0, 0.0, 0.0])
    l1 /= np.linalg.norm(l1)
    l2 = np.cross(ray, l1)

    shift = (rng.normal(0.0, depth_sigma) * ray
             + rng.normal(0.0, lateral_sigma) * l1
             + rng.normal(0.0, lateral_sigma) * l2)
    axis = rng.normal(size=3)
    axis /= max(np.linalg.norm(axis), 1e-12)
    angle = rng.normal(0.0, rot_sigma)
    R = _rodrigues(axis * angle)
    verts = (gt.vertices - centroid) @ R.T + centroid + shift
    kps = (gt.keypoints - centroid) @ R.T + centroid + shift
    return LabeledMesh(verts, gt.faces, gt.part_of, kps)


def _rodrigues(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3)
    k = w / theta
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * Kx + (1 - np.cos(theta)) * (Kx @ Kx)


def point_to_plane_icp(source: np.ndarray, target: PointCloud, init: Pose | None = None,
                       max_iter: int = 50, max_corr: float = 0.3,
                       tol: float = 1e-6) -> tuple[Pose, list[float]]:
    """Damped point-to-plane ICP; returns the transform relative to init.

    Each iteration finds nearest neighbors within max_corr, solves the
    small-angle linearized normal equations, and accepts the step only if the
    RMS point-to-plane residual does not increase (halving the step up to
    five times otherwise), so the recorded residual history never rises.
    """
    init = init or Pose.identity()
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    if len(source) == 0:
        raise DegenerateRegistrationError("empty ICP source")
    if target.normals is None or target.normal_valid is None:
        raise ValueError("ICP target needs estimated normals")
    ok = target.normal_valid
    tpts = target.points[ok]
    tnrm = target.normals[ok]
    if len(tpts) < MIN_TARGET_POINTS:
        raise DegenerateRegistrationError(
            f"target has {len(tpts)} points with valid normals (< {MIN_TARGET_POINTS})")
    index = PointIndex(tpts)

    def correspondences(T: Pose):
        src = T.apply(source)
        d, idx = index.query(src)
        m = d <= max_corr
        if m.sum() < MIN_CORRESPONDENCES:
            return None
        r = np.einsum("ij,ij->i", src[m] - tpts[idx[m]], tnrm[idx[m]])
        rms = float(np.sqrt(np.mean(r**2)))
        return src, idx, m, r, rms

    T = init
    cur = correspondences(T)
    if cur is None:
        raise DegenerateRegistrationError("fewer than 6 ICP correspondences")
    history = [cur[4]]

    for _ in range(max_iter):
        src, idx, m, r, _ = cur
        n = tnrm[idx[m]]
        A = np.hstack([np.cross(src[m], n), n])
        xi, *_ = np.linalg.lstsq(A, -r, rcond=None)

        accepted = None
        scale = 1.0
        for _attempt in range(6):
            step = xi * scale
            dR = orthonormalize(_rodrigues(step[:3]))
            T_cand = compose(Pose(dR, step[3:]), T)
            cand = correspondences(T_cand)
            if cand is not None and cand[4] <= history[-1] + 1e-15:
                accepted = (T_cand, cand)
                break
            scale *= 0.5
        if accepted is None:
            break
        T, cur = accepted
        history.append(cur[4])
        if history[-2] - history[-1] < tol:
            break

    return compose(T, init.inverse()), history


def align_target(obs: Observation, init_mesh: LabeledMesh, parts,
                 boundary_noise: int = 0, seed: int = 0,
                 icp: IcpConfig | None = None,
                 center_on_centroid: bool = False) -> AlignmentResult:
    """Algorithm core: lift the mask, register the part submesh, move the mesh.

    init_mesh must be posed in the observation's camera frame. When the
    target cloud is too small or registration degenerates the initial mesh is
    kept and the condition is flagged; the pipeline never aborts here.
    """
    icp = icp or IcpConfig()
    parts = frozenset(parts)
    mask = oracle_segmentation(obs, boundary_noise, seed)
    p_tgt, p_bg = lift_mask(obs.cloud, obs.K, mask)
    flags: list[str] = []

    if len(p_tgt) < MIN_TARGET_POINTS:
        return AlignmentResult(Pose.identity(), init_mesh, p_tgt, p_bg, parts,
                               [], ("alignment_skipped",))

    k = min(icp.normal_k, len(p_tgt))
    p_tgt = estimate_normals(p_tgt, k=k, sensor_origin=(0.0, 0.0, 0.0))

    src_idx = extract_part_submesh(init_mesh, parts)
    if src_idx.size == 0:
        src_idx = np.arange(init_mesh.n_vertices)
    source = init_mesh.vertices[src_idx]

    init = Pose.identity()
    if center_on_centroid:
        init = Pose(np.eye(3), p_tgt.points.mean(axis=0) - source.mean(axis=0))

    try:
        T_rel, history = point_to_plane_icp(source, p_tgt, init,
                                            max_iter=icp.max_iter,
                                            max_corr=icp.max_corr, tol=icp.tol)
        T_icp = compose(T_rel, init)
    except DegenerateRegistrationError:
        return AlignmentResult(Pose.identity(), init_mesh, p_tgt, p_bg, parts,
                               [], ("icp_degenerate",))

    aligned = init_mesh.transformed(T_icp)
    return AlignmentResult(T_icp, aligned, p_tgt, p_bg, parts, history, tuple(flags))


def mpvpe(a: LabeledMesh, b: LabeledMesh) -> float:
    """Mean per-vertex position error between same-topology meshes (meters)."""
    if a.n_vertices != b.n_vertices:
        raise ValueError("meshes do not share a vertex topology")
    return float(np.linalg.norm(a.vertices - b.vertices, axis=1).mean())
