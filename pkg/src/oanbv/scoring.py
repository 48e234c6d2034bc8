"""Viewpoint scoring: the occlusion-aware evaluator and two baseline scorers.

The evaluator projects the aligned mesh and the observed scene points into
each candidate camera, counts in-frame vertices, and marks a vertex occluded
when the scene-point depth buffer at its pixel is closer by more than a
relative margin. The total score is the weighted sum of in-frame completeness
(n_in/n_m), apparent scale (n_in/n_pixels), and unoccludedness (1 - n_occ/n_in).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import CameraIntrinsics, Pose, PointCloud
from .humanoid import LabeledMesh
from .scene import Observation
from .viewpoints import CandidateView

DEFAULT_WEIGHTS = (0.03, 0.14, 0.83)


@dataclass(frozen=True)
class Weights:
    w_v: float
    w_a: float
    w_o: float

    def __post_init__(self):
        if min(self.w_v, self.w_a, self.w_o) < 0:
            raise ValueError("weights must be non-negative")
        if abs(self.w_v + self.w_a + self.w_o - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")

    @staticmethod
    def default() -> "Weights":
        return Weights(*DEFAULT_WEIGHTS)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.w_v, self.w_a, self.w_o)


@dataclass(frozen=True)
class EvaluatorConfig:
    splat_radius: int = 1
    depth_margin: float = 0.02     # relative slack in the buffer depth test
    buffer_scale: float = 0.5      # occlusion buffer resolution / camera resolution


@dataclass
class ScoredCandidate:
    candidate: CandidateView
    n_in: int
    n_occ: int
    s_v: float
    s_a: float
    s_o: float
    s_total: float


def score_from_counts(n_in, n_occ, n_m: int, n_pixels: int, w: Weights):
    """Eq. terms from raw counts; everything zero when nothing is in frame."""
    n_in = np.asarray(n_in, dtype=np.float64)
    n_occ = np.asarray(n_occ, dtype=np.float64)
    any_in = n_in > 0
    safe = np.where(any_in, n_in, 1.0)
    s_v = np.where(any_in, n_in / n_m, 0.0)
    s_a = np.where(any_in, n_in / n_pixels, 0.0)
    s_o = np.where(any_in, 1.0 - n_occ / safe, 0.0)
    s_total = np.where(any_in, w.w_v * s_v + w.w_a * s_a + w.w_o * s_o, 0.0)
    return s_v, s_a, s_o, s_total


def evaluate_candidates(cands: Sequence[CandidateView], mesh: LabeledMesh,
                        scene_cloud: PointCloud, K: CameraIntrinsics, w: Weights,
                        cfg: EvaluatorConfig | None = None,
                        chunk: int = 64) -> list[ScoredCandidate]:
    """Batched occlusion-aware evaluation of candidate views (world frame in)."""
    cfg = cfg or EvaluatorConfig()
    if mesh.n_vertices == 0:
        raise ValueError("mesh has no vertices")
    Kb = K.scaled(cfg.buffer_scale)
    wb, hb = Kb.width, Kb.height
    n_m = mesh.n_vertices
    pts = scene_cloud.points
    verts = mesh.vertices
    size = (1, 2 * cfg.splat_radius + 1, 2 * cfg.splat_radius + 1)

    out: list[ScoredCandidate] = []
    for start in range(0, len(cands), chunk):
        batch = cands[start:start + chunk]
        C = len(batch)
        R = np.stack([c.cam.rotation for c in batch])        # cam->world
        t = np.stack([c.cam.translation for c in batch])
        # world->cam: p_cam = (p - t) @ R
        vc = np.matmul(verts[None, :, :] - t[:, None, :], R)  # (C, V, 3)
        vz = vc[:, :, 2]
        v_front = vz > 0
        vzs = np.where(v_front, vz, 1.0)
        vu = K.fx * vc[:, :, 0] / vzs + K.cx
        vv = K.fy * vc[:, :, 1] / vzs + K.cy
        in_frame = v_front & (vu >= 0) & (vu < K.width) & (vv >= 0) & (vv < K.height)
        n_in = in_frame.sum(axis=1)

        n_occ = np.zeros(C, dtype=np.int64)
        if len(pts):
            pc = np.matmul(pts[None, :, :] - t[:, None, :], R)
            pz = pc[:, :, 2]
            p_front = pz > 0
            pzs = np.where(p_front, pz, 1.0)
            pu = np.floor(Kb.fx * pc[:, :, 0] / pzs + Kb.cx).astype(np.int64)
            pv = np.floor(Kb.fy * pc[:, :, 1] / pzs + Kb.cy).astype(np.int64)
            ok = p_front & (pu >= 0) & (pu < wb) & (pv >= 0) & (pv < hb)
            buf = np.full(C * hb * wb, np.inf)
            cam_off = (np.arange(C)[:, None] * (hb * wb))
            flat = (cam_off + pv * wb + pu)[ok]
            np.minimum.at(buf, flat, pz[ok])
            buf = buf.reshape(C, hb, wb)
            if cfg.splat_radius > 0:
                buf = ndimage.minimum_filter(buf, size=size, mode="constant", cval=np.inf)

            bu = np.clip(np.floor(Kb.fx * vc[:, :, 0] / vzs + Kb.cx).astype(np.int64), 0, wb - 1)
            bv = np.clip(np.floor(Kb.fy * vc[:, :, 1] / vzs + Kb.cy).astype(np.int64), 0, hb - 1)
            bd = buf[np.arange(C)[:, None], bv, bu]
            occ = in_frame & np.isfinite(bd) & (bd < vz * (1.0 - cfg.depth_margin))
            n_occ = occ.sum(axis=1)

        s_v, s_a, s_o, s_total = score_from_counts(n_in, n_occ, n_m, K.n_pixels, w)
        for i, c in enumerate(batch):
            out.append(ScoredCandidate(c, int(n_in[i]), int(n_occ[i]),
                                       float(s_v[i]), float(s_a[i]), float(s_o[i]),
                                       float(s_total[i])))
    return out


def evaluate_viewpoint(cand: CandidateView, mesh: LabeledMesh, scene_cloud: PointCloud,
                       K: CameraIntrinsics, w: Weights,
                       cfg: EvaluatorConfig | None = None) -> ScoredCandidate:
    return evaluate_candidates([cand], mesh, scene_cloud, K, w, cfg)[0]


def select_best(scored: Sequence[ScoredCandidate]) -> ScoredCandidate:
    """Argmax of s_total; ties go to the earlier (lower-id) candidate."""
    if not scored:
        raise ValueError("select_best on empty candidate list")
    totals = np.array([s.s_total for s in scored])
    return scored[int(np.argmax(totals))]


# ---------------------------------------------------------------------------
# baseline scorers

UNKNOWN, FREE, OCCUPIED = 0, 1, 2


@dataclass
class OccupancyGrid:
    origin: np.ndarray             # (3,) min corner
    voxel: float
    state: np.ndarray              # (nx, ny, nz) uint8

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)

    @staticmethod
    def covering(lo, hi, voxel: float = 0.1) -> "OccupancyGrid":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        dims = np.ceil((hi - lo) / voxel).astype(int) + 1
        return OccupancyGrid(lo, voxel, np.zeros(dims, dtype=np.uint8))

    def voxel_of(self, pts: np.ndarray) -> np.ndarray:
        return np.floor((np.asarray(pts) - self.origin) / self.voxel).astype(np.int64)

    def in_bounds(self, ijk: np.ndarray) -> np.ndarray:
        return ((ijk >= 0).all(axis=-1)
                & (ijk < np.array(self.state.shape)).all(axis=-1))

    def flat(self, ijk: np.ndarray) -> np.ndarray:
        nx, ny, nz = self.state.shape
        return (ijk[..., 0] * ny + ijk[..., 1]) * nz + ijk[..., 2]


def integrate_observation(grid: OccupancyGrid, obs: Observation) -> OccupancyGrid:
    """Carve free space along camera rays and mark endpoints occupied.

    Pure: returns a new grid. unknown->free/occupied and free->occupied are
    the only allowed transitions.
    """
    state = grid.state.copy()
    new = OccupancyGrid(grid.origin, grid.voxel, state)
    if len(obs.cloud) == 0:
        return new
    pts_w = obs.cam.apply(obs.cloud.points)
    origin = obs.cam.translation
    vecs = pts_w - origin
    lengths = np.linalg.norm(vecs, axis=1)
    step = grid.voxel / 2
    n_steps = int(np.ceil(lengths.max() / step))
    s = (np.arange(n_steps) + 0.5) * step
    samples = origin + vecs[:, None, :] / lengths[:, None, None] * s[None, :, None]
    inside = s[None, :] < (lengths[:, None] - grid.voxel / 2)
    ijk = new.voxel_of(samples[inside])
    ok = new.in_bounds(ijk)
    f = new.flat(ijk[ok])
    flat_state = state.reshape(-1)
    free_mask = flat_state[f] == UNKNOWN
    flat_state[f[free_mask]] = FREE

    end = new.voxel_of(pts_w)
    ok = new.in_bounds(end)
    flat_state[new.flat(end[ok])] = OCCUPIED
    return new


def volumetric_gain(cand: CandidateView, grid: OccupancyGrid, K: CameraIntrinsics,
                    ray_budget: int = 64, max_range: float = 10.0) -> int:
    """Distinct unknown voxels visible before the first occupied hit."""
    g = max(1, int(np.sqrt(ray_budget)))
    us = (np.arange(g) + 0.5) / g * K.width
    vs = (np.arange(g) + 0.5) / g * K.height
    uu, vv = np.meshgrid(us, vs)
    d_cam = np.stack([(uu.ravel() - K.cx) / K.fx, (vv.ravel() - K.cy) / K.fy,
                      np.ones(g * g)], axis=1)
    d_w = d_cam @ cand.cam.rotation.T
    d_w /= np.linalg.norm(d_w, axis=1, keepdims=True)
    origin = cand.cam.translation

    s = np.arange(grid.voxel / 2, max_range, grid.voxel)
    samples = origin + d_w[:, None, :] * s[None, :, None]
    ijk = grid.voxel_of(samples)
    inb = grid.in_bounds(ijk)
    flat = np.where(inb, grid.flat(ijk), 0)
    st = np.where(inb, grid.state.reshape(-1)[flat], FREE)
    blocked = np.cumsum(st == OCCUPIED, axis=1) > 0
    unknown = (st == UNKNOWN) & ~blocked & inb
    if not unknown.any():
        return 0
    return int(np.unique(flat[unknown]).size)


def pred_gain(cand: CandidateView, predicted: PointCloud, observed: PointCloud,
              K: CameraIntrinsics, cfg: EvaluatorConfig | None = None,
              min_new_dist: float = 0.05, novelty: np.ndarray | None = None) -> int:
    """Predicted-completion gain: newly observable predicted points.

    Counts predicted points that project in frame, pass the same buffer depth
    test against the observed scene points, and lie farther than min_new_dist
    from every already-observed target point.
    """
    if len(predicted) == 0:
        raise ValueError("predicted cloud is empty")
    cfg = cfg or EvaluatorConfig()
    if novelty is None:
        novelty = predicted_novelty(predicted, observed, min_new_dist)

    cam = cand.cam
    pc = (predicted.points - cam.translation) @ cam.rotation
    z = pc[:, 2]
    front = z > 0
    zs = np.where(front, z, 1.0)
    u = K.fx * pc[:, 0] / zs + K.cx
    v = K.fy * pc[:, 1] / zs + K.cy
    in_frame = front & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)

    occluded = np.zeros(len(predicted), dtype=bool)
    if len(observed):
        Kb = K.scaled(cfg.buffer_scale)
        wb, hb = Kb.width, Kb.height
        oc = (observed.points - cam.translation) @ cam.rotation
        oz = oc[:, 2]
        of = oz > 0
        ozs = np.where(of, oz, 1.0)
        ou = np.floor(Kb.fx * oc[:, 0] / ozs + Kb.cx).astype(np.int64)
        ov = np.floor(Kb.fy * oc[:, 1] / ozs + Kb.cy).astype(np.int64)
        ok = of & (ou >= 0) & (ou < wb) & (ov >= 0) & (ov < hb)
        buf = np.full(hb * wb, np.inf)
        np.minimum.at(buf, ov[ok] * wb + ou[ok], oz[ok])
        buf = buf.reshape(hb, wb)
        if cfg.splat_radius > 0:
            buf = ndimage.minimum_filter(buf, size=2 * cfg.splat_radius + 1,
                                         mode="constant", cval=np.inf)
        bu = np.clip(np.floor(Kb.fx * pc[:, 0] / zs + Kb.cx).astype(np.int64), 0, wb - 1)
        bv = np.clip(np.floor(Kb.fy * pc[:, 1] / zs + Kb.cy).astype(np.int64), 0, hb - 1)
        bd = buf[bv, bu]
        occluded = in_frame & np.isfinite(bd) & (bd < z * (1.0 - cfg.depth_margin))

    return int((in_frame & ~occluded & novelty).sum())


def predicted_novelty(predicted: PointCloud, observed: PointCloud,
                      min_new_dist: float = 0.05) -> np.ndarray:
    """Candidate-independent part of pred_gain: which points would be new."""
    from .geometry import TARGET_LABEL
    if len(observed) == 0:
        return np.ones(len(predicted), dtype=bool)
    pts = observed.points
    if observed.labels is not None:
        pts = pts[observed.labels == TARGET_LABEL]
    if len(pts) == 0:
        return np.ones(len(predicted), dtype=bool)
    d, _ = cKDTree(pts).query(predicted.points)
    return d > min_new_dist
