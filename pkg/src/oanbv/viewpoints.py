"""Candidate camera pose generation.

Two samplers: the elevation-map-constrained sampler (robot base placed on
traversable cells, camera derived through the rigid mount chain) and the
target-centered spherical-shell baseline (deliberately free of any terrain
or collision checks, which is its known failure mode).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .geometry import Pose, compose, look_at, rot_x, yaw_pose

if TYPE_CHECKING:
    from .elevation import TraversableSet

STANDING_HEIGHT = 0.3
PITCH_RANGE = 0.75
DEFAULT_M = 100
DEFAULT_PITCH_SAMPLES = 10
SHELL_RADII = tuple(np.arange(2.0, 5.0 + 1e-9, 0.5))
SHELL_PER_SHELL = 100

# camera axes in base coordinates: x_cam=-y_base, y_cam=-z_base, z_cam=x_base
_MOUNT_R = np.array([[0.0, 0.0, 1.0],
                     [-1.0, 0.0, 0.0],
                     [0.0, -1.0, 0.0]])
MOUNT_FORWARD = 0.25
MOUNT_UP = 0.10


def default_mount() -> Pose:
    """Fixed base->camera transform: 0.25 m forward, 0.10 m up, zero pitch."""
    return Pose(_MOUNT_R, np.array([MOUNT_FORWARD, 0.0, MOUNT_UP]))


def camera_from_base(base: Pose, alpha: float, mount: Pose | None = None) -> Pose:
    """World camera pose: base, then mount, then pitch by alpha.

    The pitch rotates about the camera's lateral axis; positive alpha tilts
    the optical axis down. alpha=0 with the identity mount returns the base
    pose unchanged.
    """
    if abs(alpha) > PITCH_RANGE + 1e-12:
        raise ValueError(f"pitch alpha {alpha} outside +/-{PITCH_RANGE} rad")
    mount = mount or default_mount()
    pitch = Pose(rot_x(-alpha), np.zeros(3))
    return compose(base, compose(mount, pitch))


def aim_pitch(cam_position, target_point) -> float:
    """Pitch angle aiming the optical axis at a point, clamped to the range."""
    d = np.asarray(target_point, dtype=np.float64) - np.asarray(cam_position, dtype=np.float64)
    alpha = np.arctan2(-d[2], np.hypot(d[0], d[1]))
    return float(np.clip(alpha, -PITCH_RANGE, PITCH_RANGE))


@dataclass(frozen=True)
class CandidateView:
    """A candidate camera pose; id is (position index, pitch index)."""

    cam: Pose
    pitch_alpha: float
    id: tuple[int, int]
    base: Pose | None = None


MIN_STANDOFF = 1.0


def sample_candidates_elevation(trav: "TraversableSet", target_centroid,
                                M: int = DEFAULT_M,
                                pitch_samples: int = DEFAULT_PITCH_SAMPLES,
                                seed: int = 0, mount: Pose | None = None,
                                occluders: Sequence = (),
                                min_standoff: float = MIN_STANDOFF) -> list[CandidateView]:
    """Sample robot poses on traversable cells facing the target.

    Cells are drawn uniformly without replacement from the forward-facing
    half-plane (positive displacement toward the target from the current
    base); each base stands STANDING_HEIGHT above its cell surface, yawed at
    the target centroid, and fans out pitch_samples pitch angles spanning
    [-PITCH_RANGE, PITCH_RANGE] inclusive. Cells whose derived camera center
    would sit inside an occluder, or closer than min_standoff to the target
    (collision clearance with the person), are excluded up front.
    """
    mount = mount or default_mount()
    world = trav.world
    if len(world) == 0:
        raise ValueError("empty traversable set")
    centroid = np.asarray(target_centroid, dtype=np.float64)
    base_xy = world[trav.base_row, :2]
    to_target = centroid[:2] - base_xy
    disp = world[:, :2] - base_xy
    eligible = disp @ to_target > 0

    xy = world[:, :2]
    yaw = np.arctan2(centroid[1] - xy[:, 1], centroid[0] - xy[:, 0])
    base_z = world[:, 2] + STANDING_HEIGHT
    # camera center is pitch-independent: base + R_z(yaw) @ mount translation
    mt = mount.translation
    cam_x = xy[:, 0] + np.cos(yaw) * mt[0] - np.sin(yaw) * mt[1]
    cam_y = xy[:, 1] + np.sin(yaw) * mt[0] + np.cos(yaw) * mt[1]
    cam_z = base_z + mt[2]
    cam_centers = np.stack([cam_x, cam_y, cam_z], axis=1)
    eligible &= np.linalg.norm(cam_centers[:, :2] - centroid[:2], axis=1) >= min_standoff
    for box in occluders:
        eligible &= ~box.contains(cam_centers, margin=0.02)

    rows = np.flatnonzero(eligible)
    if rows.size == 0:
        raise ValueError("no eligible traversable cells face the target")
    rng = np.random.default_rng([71, seed])
    if rows.size > M:
        rows = rows[rng.choice(rows.size, size=M, replace=False)]
    pitches = np.linspace(-PITCH_RANGE, PITCH_RANGE, pitch_samples)

    out = []
    for i, r in enumerate(rows):
        base = yaw_pose((world[r, 0], world[r, 1], base_z[r]), float(yaw[r]))
        for j, alpha in enumerate(pitches):
            out.append(CandidateView(camera_from_base(base, float(alpha), mount),
                                     float(alpha), (i, j), base))
    return out


def sample_candidates_shell(centroid, radii: Sequence[float] = SHELL_RADII,
                            per_shell: int = SHELL_PER_SHELL,
                            seed: int = 0) -> list[CandidateView]:
    """Baseline: uniform points on target-centered upper-hemisphere shells.

    Every camera looks at the centroid. No terrain or collision checks are
    applied, on purpose.
    """
    centroid = np.asarray(centroid, dtype=np.float64)
    rng = np.random.default_rng([83, seed])
    out = []
    for si, r in enumerate(radii):
        phi = rng.uniform(0.0, 2 * np.pi, size=per_shell)
        z = rng.uniform(0.0, 1.0, size=per_shell)
        rho = np.sqrt(np.maximum(1.0 - z**2, 0.0))
        dirs = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
        for pi_, d in enumerate(dirs):
            pos = centroid + float(r) * d
            cam = look_at(pos, centroid)
            fwd = centroid - pos
            alpha = float(np.arctan2(-fwd[2] / np.linalg.norm(fwd),
                                     np.hypot(fwd[0], fwd[1]) / np.linalg.norm(fwd)))
            out.append(CandidateView(cam, alpha, (si, pi_), None))
    return out
